"""Manifests, PNG frame directories and the FLTN tensor file format.

FLTN layout (little-endian throughout)::

    offset  size      field
    0       4         magic b"FLTN"
    4       2 (u16)   version, currently 1
    6       1 (u8)    dtype code, 1 = float32
    7       1 (u8)    ndim
    8       4*ndim    dims, u32 each
    ...     4*prod    payload, row-major
"""

from __future__ import annotations

import csv
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import BadMagic, ContractError, FormatError, ManifestError, MissingFrame, ShapeMismatch, Truncated

MAGIC = b"FLTN"
VERSION = 1
DTYPE_F32 = 1
_HEADER = struct.Struct("<4sHBB")
_U32_MAX = 2**32 - 1

DEFAULT_FRAME_PATTERN = "frame_%05d.png"


@dataclass(frozen=True)
class ManifestEntry:
    clip_path: str
    label: int
    frame_count: int | None = None


def load_manifest(path, n_classes: int | None = None) -> list[ManifestEntry]:
    """Read a ``path,label`` CSV. Errors name the offending line (1-based)."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ManifestError("file is empty, expected header 'path,label'", line=1)
        header = [h.strip() for h in header]
        if header[:2] != ["path", "label"]:
            raise ManifestError(f"expected header 'path,label', got {','.join(header)!r}", line=1)
        has_count = len(header) > 2 and header[2] == "frame_count"
        entries = []
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < 2:
                raise ManifestError(f"expected 'path,label', got {','.join(row)!r}", line=line)
            clip, raw = row[0].strip(), row[1].strip()
            if not clip:
                raise ManifestError("empty clip path", line=line)
            if not re.fullmatch(r"\d+", raw):
                raise ManifestError(f"label {raw!r} is not a non-negative integer", line=line)
            label = int(raw)
            if n_classes is not None and label >= n_classes:
                raise ManifestError(f"label {label} >= class count {n_classes}", line=line)
            count = None
            if has_count and len(row) > 2 and row[2].strip():
                count = int(row[2])
            entries.append(ManifestEntry(clip, label, count))
    return entries


def write_manifest(path, entries) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label"])
        for e in entries:
            writer.writerow([e.clip_path, e.label])


def resolve_clip(entry: ManifestEntry, manifest_path) -> Path:
    """Clip paths in a manifest are relative to the manifest's directory."""
    p = Path(entry.clip_path)
    return p if p.is_absolute() else Path(manifest_path).parent / p


def _pattern_regex(pattern: str) -> re.Pattern:
    m = re.search(r"%0?(\d*)d", pattern)
    if m is None:
        raise ContractError(f"frame pattern {pattern!r} has no %d field")
    prefix, suffix = pattern[: m.start()], pattern[m.end():]
    return re.compile(re.escape(prefix) + r"(\d+)" + re.escape(suffix) + r"\Z")


def _to_float(img: Image.Image) -> np.ndarray:
    if img.mode in ("L", "RGB"):
        pass
    elif img.mode in ("1", "P", "LA", "I", "I;16", "F"):
        img = img.convert("L") if img.mode != "P" else img.convert("RGB")
    else:
        img = img.convert("RGB")
    arr = np.asarray(img, dtype=np.float32) / np.float32(255.0)
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)


def read_frame_dir(directory, pattern: str = DEFAULT_FRAME_PATTERN) -> np.ndarray:
    """Load ``frame_00000.png, frame_00001.png, ...`` into a ``(t, c, h, w)`` clip.

    Indices start at 0 and must be contiguous. 8-bit values map to ``v / 255``.
    """
    directory = Path(directory)
    rx = _pattern_regex(pattern)
    found = {}
    for p in directory.iterdir():
        m = rx.match(p.name)
        if m:
            found[int(m.group(1))] = p
    if not found:
        raise FormatError(f"no frames matching {pattern!r} in {directory}")
    frames = []
    for k in range(max(found) + 1):
        if k not in found:
            raise MissingFrame(k)
        try:
            with Image.open(found[k]) as img:
                arr = _to_float(img)
        except (OSError, SyntaxError) as exc:
            raise FormatError(f"cannot decode {found[k]}: {exc}") from exc
        if frames and arr.shape != frames[0].shape:
            raise ShapeMismatch(
                f"{found[k].name} is {arr.shape}, earlier frames are {frames[0].shape}"
            )
        frames.append(arr)
    return np.stack(frames)


def _quantize(x: np.ndarray) -> np.ndarray:
    # round half up; x already in [0, 1]
    return np.floor(x * 255.0 + 0.5).astype(np.uint8)


def _save_png(chw: np.ndarray, path) -> None:
    c = chw.shape[0]
    if c == 1:
        Image.fromarray(chw[0]).save(path, format="PNG")
    elif c == 3:
        Image.fromarray(np.ascontiguousarray(chw.transpose(1, 2, 0))).save(path, format="PNG")
    else:
        raise ContractError(f"PNG export supports 1 or 3 channels, got {c}")


def write_frame_dir(frames, directory, pattern: str = DEFAULT_FRAME_PATTERN) -> None:
    """Write each frame as an 8-bit PNG (values clipped to [0, 1])."""
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 4 or frames.shape[1] not in (1, 3):
        raise ContractError(f"expected (t, 1|3, h, w) frames, got {frames.shape}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k, frame in enumerate(frames):
        _save_png(_quantize(np.clip(frame, 0.0, 1.0)), directory / (pattern % k))


def write_composite_png(img, path, normalization: str = "clip01") -> None:
    """Save a ``(c, H, W)`` composite (or :class:`FlatImage`) as a lossless PNG.

    ``clip01`` clamps to [0, 1]; ``minmax`` maps the observed range onto it
    (a constant image becomes black).
    """
    pixels = np.asarray(getattr(img, "pixels", img), dtype=np.float64)
    if pixels.ndim != 3 or pixels.shape[0] not in (1, 3):
        raise ContractError(f"PNG export supports (1|3, H, W), got {pixels.shape}")
    if normalization == "clip01":
        x = np.clip(pixels, 0.0, 1.0)
    elif normalization == "minmax":
        lo, hi = float(pixels.min()), float(pixels.max())
        x = (pixels - lo) / (hi - lo) if hi > lo else np.zeros_like(pixels)
    else:
        raise ContractError(f"unknown normalization {normalization!r}")
    _save_png(_quantize(x), path)


def encode_tensor(array) -> bytes:
    arr = np.asarray(array)
    if arr.dtype != np.float32:
        raise ContractError(f"tensor files hold float32, got {arr.dtype}")
    if arr.ndim > 255:
        raise ContractError("too many dimensions")
    if any(d > _U32_MAX for d in arr.shape):
        raise ContractError(f"dimension overflow in {arr.shape}")
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_F32, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + dims + np.ascontiguousarray(arr).astype("<f4", copy=False).tobytes()


def decode_tensor(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise Truncated(f"header needs {_HEADER.size} bytes, got {len(data)}")
    magic, version, dtype, ndim = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic(f"expected magic {MAGIC!r}, got {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported tensor file version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype}")
    off = _HEADER.size + 4 * ndim
    if len(data) < off:
        raise Truncated(f"dims need {off} bytes, got {len(data)}")
    dims = struct.unpack_from(f"<{ndim}I", data, _HEADER.size)
    count = 1
    for d in dims:
        count *= d
    expected = off + 4 * count
    if expected > 2**62:
        raise FormatError(f"dimension overflow in {dims}")
    if len(data) < expected:
        raise Truncated(f"payload is {len(data) - off} bytes, expected {4 * count}")
    if len(data) > expected:
        raise FormatError(f"{len(data) - expected} trailing bytes after payload")
    return np.frombuffer(data, dtype="<f4", count=count, offset=off).astype(np.float32).reshape(dims)


def write_tensor(path, array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def read_clip(path, pattern: str = DEFAULT_FRAME_PATTERN) -> np.ndarray:
    """A clip is either a frame directory or a 4-D tensor file."""
    path = Path(path)
    if path.is_dir():
        return read_frame_dir(path, pattern)
    arr = read_tensor(path)
    if arr.ndim != 4:
        raise ShapeMismatch(f"{path} holds shape {arr.shape}, expected (t, c, h, w)")
    return arr
