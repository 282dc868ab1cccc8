"""Invertible clip-to-composite transforms.

A clip is a float32 array laid out ``(t, c, h, w)``. Every transform tiles the
``t`` frames into a ``rows x cols`` block grid and returns a ``(c, rows*h, cols*w)``
composite. The canonical orientation follows ``(n m) c h w -> c (n h) (m w)``:
frame ``k`` lands in block row ``k // cols`` and block column ``k % cols``.

All three kinds reduce to the same copy: a *slot order* (which frame occupies
each row-major block slot) followed by row-major tiling. Unflattening inverts
the tiling and then the slot order, so round trips are exact bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import ContractError, InvalidPermutation, NotPerfectSquare, ShapeMismatch
from .seeding import seeded_permutation


class Kind(str, Enum):
    ROW_MAJOR = "row-major"
    NESTED = "nested"
    RANDOM = "random"

    @classmethod
    def parse(cls, value: "str | Kind") -> "Kind":
        if isinstance(value, Kind):
            return value
        norm = value.strip().lower().replace("_", "-")
        for kind in cls:
            if kind.value == norm:
                return kind
        raise ContractError(f"unknown flatten kind {value!r}")


@dataclass(frozen=True)
class GridSpec:
    """Block layout of a composite. Block dims may be left ``None`` and inferred."""

    rows: int
    cols: int
    block_h: int | None = None
    block_w: int | None = None

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ContractError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")

    @property
    def blocks(self) -> int:
        return self.rows * self.cols

    @classmethod
    def parse(cls, text: str) -> "GridSpec":
        try:
            r, c = text.lower().replace("×", "x").split("x")
            return cls(int(r), int(c))
        except ValueError:
            raise ContractError(f"grid must look like RxC, got {text!r}") from None

    def __str__(self) -> str:
        return f"{self.rows}x{self.cols}"


def as_frames(frames) -> np.ndarray:
    """Validate a ``(t, c, h, w)`` clip and return it as float32."""
    arr = np.asarray(frames)
    if arr.ndim != 4:
        raise ShapeMismatch(f"expected a (t, c, h, w) clip, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeMismatch(f"clip has an empty axis: {arr.shape}")
    if arr.dtype != np.float32:
        arr = arr.astype(np.float32)
    return arr


def square_grid_for(t: int) -> tuple[int, int]:
    if t < 1:
        raise ContractError(f"frame count must be >= 1, got {t}")
    m = math.isqrt(t)
    if m * m != t:
        raise NotPerfectSquare(t)
    return m, m


def default_nested_n(t: int) -> int:
    """Sub-sequence count used when none is given: sqrt(t) when t is a fourth power."""
    m = math.isqrt(t)
    r = math.isqrt(m)
    if m * m != t or r * r != m:
        raise ContractError(
            f"no default sub-sequence count for {t} frames; pass nested_n explicitly"
        )
    return m


def frame_to_block(
    k: int, cols: int, *, rows: int | None = None, transpose: bool = False
) -> tuple[int, int]:
    """Block ``(row, col)`` of frame ``k``.

    With ``transpose=True`` frames run top-to-bottom first (block column
    ``k // rows``, block row ``k % rows``); that orientation needs ``rows``.
    """
    if cols < 1:
        raise ContractError("cols must be >= 1")
    if transpose and rows is None:
        raise ContractError("transposed placement needs the row count")
    limit = None if rows is None else rows * cols
    if k < 0 or (limit is not None and k >= limit):
        raise IndexError(f"frame index {k} outside a grid of {limit} blocks")
    if transpose:
        return k % rows, k // rows
    return k // cols, k % cols


def _check_grid(frames: np.ndarray, grid: GridSpec) -> None:
    t, _, h, w = frames.shape
    if grid.blocks != t:
        raise ShapeMismatch(f"grid {grid} holds {grid.blocks} frames, clip has {t}")
    if (grid.block_h is not None and grid.block_h != h) or (
        grid.block_w is not None and grid.block_w != w
    ):
        raise ShapeMismatch(
            f"grid block {grid.block_h}x{grid.block_w} does not match frame {h}x{w}"
        )


def _tile(frames: np.ndarray, rows: int, cols: int, transpose: bool) -> np.ndarray:
    t, c, h, w = frames.shape
    if transpose:
        # (m n) c h w -> c (n h) (m w)
        arr = frames.reshape(cols, rows, c, h, w).transpose(2, 1, 3, 0, 4)
    else:
        # (n m) c h w -> c (n h) (m w)
        arr = frames.reshape(rows, cols, c, h, w).transpose(2, 0, 3, 1, 4)
    return np.ascontiguousarray(arr).reshape(c, rows * h, cols * w)


def _untile(img: np.ndarray, rows: int, cols: int, transpose: bool) -> np.ndarray:
    c, H, W = img.shape
    h, w = H // rows, W // cols
    arr = img.reshape(c, rows, h, cols, w)
    if transpose:
        arr = arr.transpose(3, 1, 0, 2, 4)
    else:
        arr = arr.transpose(1, 3, 0, 2, 4)
    return np.ascontiguousarray(arr).reshape(rows * cols, c, h, w)


def row_major_flatten(frames, grid: GridSpec, *, transpose: bool = False) -> np.ndarray:
    """Tile frames left-to-right, top-to-bottom into a ``(c, H, W)`` composite."""
    frames = as_frames(frames)
    _check_grid(frames, grid)
    return _tile(frames, grid.rows, grid.cols, transpose)


def _as_grid(g: "GridSpec | tuple[int, int]") -> GridSpec:
    return g if isinstance(g, GridSpec) else GridSpec(*g)


def nested_slot_order(
    t: int,
    n_sub: int,
    inner: "GridSpec | tuple[int, int]",
    outer: "GridSpec | tuple[int, int]",
    *,
    transpose: bool = False,
) -> list[int]:
    """Frame index held by each row-major slot of the overall nested grid."""
    inner, outer = _as_grid(inner), _as_grid(outer)
    if n_sub < 1 or t % n_sub:
        raise ContractError(f"{n_sub} sub-sequences do not divide {t} frames")
    q = t // n_sub
    if inner.blocks != q:
        raise ContractError(f"inner grid {inner} does not tile {q} frames per sub-sequence")
    if outer.blocks != n_sub:
        raise ContractError(f"outer grid {outer} does not tile {n_sub} sub-sequences")
    cols = outer.cols * inner.cols
    order = [0] * t
    for k in range(t):
        n, i = divmod(k, q)
        o_r, o_c = frame_to_block(n, outer.cols, rows=outer.rows, transpose=transpose)
        i_r, i_c = frame_to_block(i, inner.cols, rows=inner.rows, transpose=transpose)
        order[(o_r * inner.rows + i_r) * cols + o_c * inner.cols + i_c] = k
    return order


def nested_flatten(
    frames,
    n_sub: int,
    inner_grid: "GridSpec | tuple[int, int]",
    outer_grid: "GridSpec | tuple[int, int]",
    *,
    transpose: bool = False,
) -> np.ndarray:
    """Tile each contiguous sub-sequence, then tile the sub-composites.

    Done in a single copy through the composed block mapping.
    """
    frames = as_frames(frames)
    inner, outer = _as_grid(inner_grid), _as_grid(outer_grid)
    order = nested_slot_order(frames.shape[0], n_sub, inner, outer, transpose=transpose)
    # slot order already encodes the transposed placement; tile canonically
    return _tile(frames[order], outer.rows * inner.rows, outer.cols * inner.cols, False)


def check_permutation(perm: Sequence[int], t: int) -> tuple[int, ...]:
    perm = tuple(int(p) for p in perm)
    if len(perm) != t or sorted(perm) != list(range(t)):
        raise InvalidPermutation(f"{list(perm)} is not a permutation of 0..{t - 1}")
    return perm


def random_flatten(
    frames,
    grid: GridSpec,
    permutation: Sequence[int] | None = None,
    *,
    seed: int | None = None,
    transpose: bool = False,
) -> tuple[np.ndarray, tuple[int, ...]]:
    """Row-major tiling of ``frames[permutation]``.

    Without an explicit permutation one is drawn from ``seed`` via
    :func:`flattenkit.seeding.seeded_permutation`. Returns the composite and
    the permutation used (slot ``s`` holds frame ``permutation[s]``).
    """
    frames = as_frames(frames)
    t = frames.shape[0]
    if permutation is None:
        if seed is None:
            raise ContractError("random flatten needs a permutation or a seed")
        permutation = seeded_permutation(t, seed)
    perm = check_permutation(permutation, t)
    return row_major_flatten(frames[list(perm)], grid, transpose=transpose), perm


@dataclass(frozen=True)
class FlattenPlan:
    """Everything needed to run a transform and invert it.

    ``inner_grid`` applies to nested plans; when omitted both levels are
    square (``sqrt(t / nested_n)`` and ``sqrt(nested_n)``).
    """

    kind: Kind
    grid: GridSpec
    nested_n: int | None = None
    inner_grid: GridSpec | None = None
    permutation: tuple[int, ...] | None = None
    seed: int | None = None
    transpose: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind.parse(self.kind))
        t = self.grid.blocks
        if self.kind is Kind.NESTED:
            n = self.nested_n if self.nested_n is not None else default_nested_n(t)
            object.__setattr__(self, "nested_n", n)
            inner, outer = self._levels()
            if inner.rows * outer.rows != self.grid.rows or inner.cols * outer.cols != self.grid.cols:
                raise ContractError(
                    f"inner {inner} x outer {outer} does not compose to grid {self.grid}"
                )
        if self.kind is Kind.RANDOM:
            if self.permutation is not None:
                object.__setattr__(self, "permutation", check_permutation(self.permutation, t))
            elif self.seed is None:
                raise ContractError("random plan needs a permutation or a seed")

    @property
    def t(self) -> int:
        return self.grid.blocks

    def _levels(self) -> tuple[GridSpec, GridSpec]:
        t, n = self.grid.blocks, self.nested_n
        if n < 1 or t % n:
            raise ContractError(f"{n} sub-sequences do not divide {t} frames")
        if self.inner_grid is not None:
            inner = self.inner_grid
            if self.grid.rows % inner.rows or self.grid.cols % inner.cols:
                raise ContractError(f"inner grid {inner} does not divide grid {self.grid}")
            return inner, GridSpec(self.grid.rows // inner.rows, self.grid.cols // inner.cols)
        qi, ni = math.isqrt(t // n), math.isqrt(n)
        if qi * qi != t // n or ni * ni != n:
            raise ContractError(
                f"square nesting needs square sub-sequence length and count; "
                f"got q={t // n}, N={n}; pass inner_grid"
            )
        return GridSpec(qi, qi), GridSpec(ni, ni)

    def levels(self) -> tuple[GridSpec, GridSpec]:
        """(inner, outer) grids of a nested plan."""
        if self.kind is not Kind.NESTED:
            raise ContractError("only nested plans have two levels")
        return self._levels()

    def resolve(self) -> "FlattenPlan":
        """Copy with the seeded permutation materialized (random plans only)."""
        if self.kind is Kind.RANDOM and self.permutation is None:
            perm = tuple(seeded_permutation(self.t, self.seed))
            return FlattenPlan(self.kind, self.grid, permutation=perm, seed=self.seed,
                               transpose=self.transpose)
        return self

    def slot_order(self) -> list[int]:
        """Frame index at each slot of the final tiling (row-major unless transposed)."""
        if self.kind is Kind.ROW_MAJOR:
            return list(range(self.t))
        if self.kind is Kind.RANDOM:
            return list(self.resolve().permutation)
        inner, outer = self._levels()
        return nested_slot_order(self.t, self.nested_n, inner, outer, transpose=self.transpose)

    def to_dict(self) -> dict:
        d = {"kind": self.kind.value, "grid": str(self.grid), "transpose": self.transpose}
        if self.kind is Kind.NESTED:
            inner, _ = self._levels()
            d.update(nested_n=self.nested_n, inner_grid=str(inner))
        if self.kind is Kind.RANDOM:
            d.update(seed=self.seed, permutation=list(self.resolve().permutation))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FlattenPlan":
        perm = d.get("permutation")
        inner = d.get("inner_grid")
        return cls(
            kind=Kind.parse(d["kind"]),
            grid=GridSpec.parse(d["grid"]),
            nested_n=d.get("nested_n"),
            inner_grid=GridSpec.parse(inner) if inner else None,
            permutation=tuple(perm) if perm is not None else None,
            seed=d.get("seed"),
            transpose=bool(d.get("transpose", False)),
        )


@dataclass(frozen=True)
class FlatImage:
    pixels: np.ndarray
    plan: FlattenPlan | None = field(default=None, compare=False)


def _tiles_transposed(plan: FlattenPlan) -> bool:
    # nested slot orders already include the transposed placement
    return plan.transpose and plan.kind is not Kind.NESTED


def flatten(frames, plan: FlattenPlan) -> FlatImage:
    """Apply ``plan`` to a clip. Random plans are resolved first, so the
    returned provenance always carries the permutation that was used."""
    frames = as_frames(frames)
    plan = plan.resolve()
    _check_grid(frames, plan.grid)
    order = plan.slot_order()
    pixels = _tile(frames[order], plan.grid.rows, plan.grid.cols, _tiles_transposed(plan))
    return FlatImage(pixels, plan)


def unflatten(img: "FlatImage | np.ndarray", plan: FlattenPlan | None = None) -> np.ndarray:
    """Exact inverse of :func:`flatten`; ``plan`` defaults to the image's provenance."""
    if isinstance(img, FlatImage):
        pixels, plan = img.pixels, plan or img.plan
    else:
        pixels = img
    if plan is None:
        raise ContractError("unflatten needs a plan")
    if plan.kind is Kind.RANDOM and plan.permutation is None and plan.seed is None:
        raise ContractError("random plan is missing its permutation")
    pixels = np.asarray(pixels)
    if pixels.ndim != 3:
        raise ShapeMismatch(f"expected a (c, H, W) composite, got shape {pixels.shape}")
    g = plan.grid
    _, H, W = pixels.shape
    if H % g.rows or W % g.cols:
        raise ShapeMismatch(f"composite {H}x{W} is not divisible by grid {g}")
    if (g.block_h is not None and H != g.rows * g.block_h) or (
        g.block_w is not None and W != g.cols * g.block_w
    ):
        raise ShapeMismatch(f"composite {H}x{W} does not match grid blocks")
    plan = plan.resolve()
    slots = _untile(pixels, g.rows, g.cols, _tiles_transposed(plan))
    frames = np.empty_like(slots)
    frames[plan.slot_order()] = slots
    return frames
