"""Fixed-length, fixed-resolution views of a clip.

A view spec ``AxBxCxD`` asks for B frames at AxA, taken from each of C
spatial crops and D temporal crops (C*D views per clip).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import InvalidViewSpec
from .grid import as_frames

_VIEW_RX = re.compile(r"\s*(\d+)\s*[x×]\s*(\d+)\s*[x×]\s*(\d+)\s*[x×]\s*(\d+)\s*", re.IGNORECASE)


@dataclass(frozen=True)
class ViewSpec:
    resolution: int
    frames: int
    spatial_crops: int = 1
    temporal_crops: int = 1

    def __post_init__(self):
        if min(self.resolution, self.frames, self.spatial_crops, self.temporal_crops) < 1:
            raise InvalidViewSpec(f"view spec fields must be positive: {self}")
        if self.spatial_crops not in (1, 3):
            raise InvalidViewSpec(f"spatial crops must be 1 or 3, got {self.spatial_crops}")

    @property
    def n_views(self) -> int:
        return self.spatial_crops * self.temporal_crops

    def __str__(self) -> str:
        return f"{self.resolution}x{self.frames}x{self.spatial_crops}x{self.temporal_crops}"


def parse_view_spec(text: str) -> ViewSpec:
    m = _VIEW_RX.fullmatch(text)
    if m is None:
        raise InvalidViewSpec(f"view spec must look like AxBxCxD, got {text!r}")
    return ViewSpec(*(int(g) for g in m.groups()))


@dataclass(frozen=True)
class ClipView:
    frames: np.ndarray
    crop_index: int
    temporal_index: int


def _round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def uniform_sample_indices(total: int, b: int, d_index: int = 0, d_total: int = 1) -> list[int]:
    """Indices of ``b`` evenly spaced frames from temporal crop ``d_index`` of ``d_total``.

    A single temporal crop spans the whole source. With several crops each
    window covers ``b * stride`` frames, ``stride = max(1, total // (b * d_total))``,
    and window starts are evenly spaced from 0 to ``total - window``. Sources
    shorter than ``b`` repeat frames.
    """
    if total < 1 or b < 1:
        raise ValueError(f"need total >= 1 and b >= 1, got total={total}, b={b}")
    if not 0 <= d_index < d_total:
        raise ValueError(f"temporal crop {d_index} outside 0..{d_total - 1}")
    if d_total == 1:
        window = total
    else:
        stride = max(1, total // (b * d_total))
        window = min(total, b * stride)
    start = _round_half_up(d_index * (total - window) / max(d_total - 1, 1))
    if b == 1:
        return [start + (window - 1) // 2]
    return [start + _round_half_up(i * (window - 1) / (b - 1)) for i in range(b)]


def _resize_axis_weights(n_in: int, n_out: int):
    # half-pixel centres: src = (dst + 0.5) * n_in / n_out - 0.5
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a ``(..., h, w)`` array, no antialiasing."""
    h, w = img.shape[-2:]
    if (h, w) == (out_h, out_w):
        return img.copy()
    x = img.astype(np.float64)
    lo, hi, f = _resize_axis_weights(h, out_h)
    x = x[..., lo, :] * (1 - f)[:, None] + x[..., hi, :] * f[:, None]
    lo, hi, f = _resize_axis_weights(w, out_w)
    x = x[..., lo] * (1 - f) + x[..., hi] * f
    return x.astype(img.dtype)


def _short_side_size(h: int, w: int, resolution: int) -> tuple[int, int]:
    if h <= w:
        return resolution, max(resolution, int(w * resolution / h))
    return max(resolution, int(h * resolution / w)), resolution


def spatial_crop_resize(frame: np.ndarray, resolution: int, crop_index: int = 0, crop_total: int = 1) -> np.ndarray:
    """Scale the shorter side to ``resolution`` then cut a square crop.

    Works on ``(c, h, w)`` frames or whole ``(t, c, h, w)`` clips, so every
    frame of a clip gets the same crop. One crop is centred; three crops run
    left/centre/right (top/middle/bottom for portrait input).
    """
    if crop_total not in (1, 3) or not 0 <= crop_index < crop_total:
        raise InvalidViewSpec(f"crop {crop_index} of {crop_total} is not supported")
    h, w = frame.shape[-2:]
    nh, nw = _short_side_size(h, w, resolution)
    resized = resize_bilinear(frame, nh, nw)
    slack_y, slack_x = nh - resolution, nw - resolution
    pos = 1 if crop_total == 1 else crop_index
    y0, x0 = slack_y * pos // 2, slack_x * pos // 2
    return resized[..., y0:y0 + resolution, x0:x0 + resolution]


def make_views(source, spec: ViewSpec) -> list[ClipView]:
    """All ``C * D`` evaluation views, temporal crop outer, spatial crop inner."""
    source = as_frames(source)
    views = []
    for d in range(spec.temporal_crops):
        idx = uniform_sample_indices(source.shape[0], spec.frames, d, spec.temporal_crops)
        clip = source[idx]
        for c in range(spec.spatial_crops):
            views.append(ClipView(spatial_crop_resize(clip, spec.resolution, c, spec.spatial_crops), c, d))
    return views


def random_view(source, spec: ViewSpec, rng: np.random.Generator, *, flip: bool = True) -> np.ndarray:
    """Training-time view: random temporal window, short-side scale in
    ``[A, 1.15 A]``, random square crop and (optionally) a horizontal flip,
    all shared by every frame of the clip.
    """
    source = as_frames(source)
    total, b = source.shape[0], spec.frames
    d_total = max(1, total // b)
    idx = uniform_sample_indices(total, b, int(rng.integers(d_total)), d_total)
    clip = source[idx]
    h, w = clip.shape[-2:]
    target = int(rng.integers(spec.resolution, math.floor(1.15 * spec.resolution) + 1))
    nh, nw = _short_side_size(h, w, target)
    clip = resize_bilinear(clip, nh, nw)
    y0 = int(rng.integers(nh - spec.resolution + 1))
    x0 = int(rng.integers(nw - spec.resolution + 1))
    clip = clip[..., y0:y0 + spec.resolution, x0:x0 + spec.resolution]
    if flip and rng.random() < 0.5:
        clip = clip[..., ::-1]
    return np.ascontiguousarray(clip)
