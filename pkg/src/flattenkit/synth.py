"""Synthetic moving-sprite clips whose class lives in the motion.

Each class is a (direction, speed) pair. Reversing a clip in time turns it
into a clip of the opposite direction with the same set of frames, so a
model that ignores frame order cannot separate such pairs.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, SpriteOutOfBounds
from .ingest import ManifestEntry, write_manifest, write_tensor
from .seeding import derive_seed

# unit steps in image coordinates (y grows downwards, so 90 degrees is "up")
DIRECTIONS = {0: (1, 0), 90: (0, -1), 180: (-1, 0), 270: (0, 1)}
DEFAULT_CLASSES = tuple((d, s) for d in (0, 90, 180, 270) for s in (1, 2))
STATIC_CLASS = (0, 0)
SHAPES = ("square", "cross")
SPLITS = {"train": 0, "val": 1}


def _extent(size: int) -> tuple[int, int]:
    before = (size - 1) // 2
    return before, size - 1 - before


@dataclass(frozen=True)
class SpriteClipSpec:
    """One clip. ``canvas`` is (h, w); ``start`` is the (x, y) sprite centre at frame 0."""

    canvas: tuple[int, int] = (32, 32)
    t: int = 16
    shape: str = "square"
    size: int = 2
    direction: int = 0
    speed: int = 1
    start: tuple[int, int] = (0, 0)
    noise: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.t < 1 or min(self.canvas) < 1:
            raise ContractError("clip needs t >= 1 and a non-empty canvas")
        if self.direction not in DIRECTIONS:
            raise ContractError(f"direction must be one of {sorted(DIRECTIONS)}, got {self.direction}")
        if self.speed < 0:
            raise ContractError(f"speed must be >= 0, got {self.speed}")
        if self.shape not in SHAPES:
            raise ContractError(f"shape must be one of {SHAPES}, got {self.shape!r}")
        if self.size < 1 or (self.shape == "cross" and self.size % 2 == 0):
            raise ContractError(f"invalid {self.shape} size {self.size}")
        if self.noise < 0:
            raise ContractError("noise sigma must be >= 0")
        h, w = self.canvas
        before, after = _extent(self.size)
        for k, (x, y) in enumerate(self.centers()):
            if x - before < 0 or y - before < 0 or x + after >= w or y + after >= h:
                raise SpriteOutOfBounds(f"sprite leaves the {h}x{w} canvas at frame {k} (centre {x},{y})")

    def centers(self) -> list[tuple[int, int]]:
        dx, dy = DIRECTIONS[self.direction]
        x0, y0 = self.start
        return [(x0 + k * self.speed * dx, y0 + k * self.speed * dy) for k in range(self.t)]


def _stamp(frame: np.ndarray, shape: str, size: int, x: int, y: int) -> None:
    before, after = _extent(size)
    if shape == "square":
        frame[y - before:y + after + 1, x - before:x + after + 1] = 1.0
    else:
        frame[y, x - before:x + after + 1] = 1.0
        frame[y - before:y + after + 1, x] = 1.0


def class_index(direction: int, speed: int, classes=DEFAULT_CLASSES) -> int:
    key = STATIC_CLASS if speed == 0 else (direction, speed)
    try:
        return list(classes).index(key)
    except ValueError:
        raise ContractError(f"(direction={direction}, speed={speed}) is not in the class table") from None


def render_clip(spec: SpriteClipSpec, classes=DEFAULT_CLASSES) -> tuple[np.ndarray, int]:
    """Render a ``(t, 1, h, w)`` clip: sprite value 1 on 0, plus N(0, noise) per pixel."""
    spec.validate()
    h, w = spec.canvas
    frames = np.zeros((spec.t, 1, h, w), np.float32)
    for k, (x, y) in enumerate(spec.centers()):
        _stamp(frames[k, 0], spec.shape, spec.size, x, y)
    if spec.noise > 0:
        rng = np.random.default_rng(spec.seed)
        frames += rng.normal(0.0, spec.noise, frames.shape).astype(np.float32)
    return frames, class_index(spec.direction, spec.speed, classes)


def start_range(n: int, size: int, step: int, t: int) -> tuple[int, int]:
    """Inclusive range of frame-0 centres along one axis that keep the sprite inside."""
    before, after = _extent(size)
    travel = step * (t - 1)
    return before - min(0, travel), n - 1 - after - max(0, travel)


@dataclass(frozen=True)
class SynthDataset:
    classes: tuple = DEFAULT_CLASSES
    train_per_class: int = 64
    val_per_class: int = 16
    seed: int = 1
    canvas: tuple[int, int] = (32, 32)
    t: int = 16
    shape: str = "square"
    size: int = 2
    noise: float = 0.05

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def split_seed(self, split: str) -> int:
        return derive_seed(self.seed, SPLITS[split])

    def clip_spec(self, split: str, index: int) -> SpriteClipSpec:
        """Clip ``index`` of a split: class ``index % n_classes``, random start."""
        clip_seed = derive_seed(self.split_seed(split), index)
        direction, speed = self.classes[index % self.n_classes]
        dx, dy = DIRECTIONS[direction]
        h, w = self.canvas
        rng = np.random.default_rng(clip_seed)
        lo_x, hi_x = start_range(w, self.size, speed * dx, self.t)
        lo_y, hi_y = start_range(h, self.size, speed * dy, self.t)
        if lo_x > hi_x or lo_y > hi_y:
            raise SpriteOutOfBounds(
                f"class (direction={direction}, speed={speed}) cannot fit {self.t} frames on {h}x{w}"
            )
        start = (int(rng.integers(lo_x, hi_x + 1)), int(rng.integers(lo_y, hi_y + 1)))
        return SpriteClipSpec(self.canvas, self.t, self.shape, self.size, direction, speed,
                              start, self.noise, clip_seed)

    def count(self, split: str) -> int:
        return (self.train_per_class if split == "train" else self.val_per_class) * self.n_classes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = [{"label": i, "direction": c[0], "speed": c[1]} for i, c in enumerate(self.classes)]
        d["canvas"] = list(self.canvas)
        return d


def clip_digest(frames: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(frames, np.float32).tobytes()).hexdigest()


def generate_dataset(definition: SynthDataset, out_dir, workers: int = 1) -> Path:
    """Write TensorFile clips, ``train.csv``/``val.csv`` and ``dataset.json``.

    Returns the path of ``train.csv``; ``val.csv`` sits next to it.
    """
    out_dir = Path(out_dir)
    for split in SPLITS:
        (out_dir / split).mkdir(parents=True, exist_ok=True)

    def build(job):
        split, i = job
        frames, label = render_clip(definition.clip_spec(split, i), definition.classes)
        rel = f"{split}/clip_{i:05d}.fltn"
        write_tensor(out_dir / rel, frames)
        return split, ManifestEntry(rel, label)

    jobs = [(s, i) for s in SPLITS for i in range(definition.count(s))]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(build, jobs))
    else:
        results = [build(j) for j in jobs]
    for split in SPLITS:
        write_manifest(out_dir / f"{split}.csv", [e for s, e in results if s == split])

    meta = {
        "format": "flattenkit-synth",
        "version": 1,
        "dataset": definition.to_dict(),
        "splits": {
            s: {"manifest": f"{s}.csv", "count": definition.count(s), "seed": definition.split_seed(s)}
            for s in SPLITS
        },
    }
    (out_dir / "dataset.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return out_dir / "train.csv"
