import math

import einops
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flattenkit.errors import ContractError, InvalidPermutation, NotPerfectSquare, ShapeMismatch
from flattenkit.grid import (
    FlatImage,
    FlattenPlan,
    GridSpec,
    Kind,
    default_nested_n,
    flatten,
    frame_to_block,
    nested_flatten,
    random_flatten,
    row_major_flatten,
    square_grid_for,
    unflatten,
)
from flattenkit.seeding import seeded_permutation


def brute_rearrange(frames, n, m):
    """Loop-level evaluation of "(n m) c h w -> c (n h) (m w)"."""
    t, c, h, w = frames.shape
    out = np.zeros((c, n * h, m * w), frames.dtype)
    for i in range(n):
        for j in range(m):
            for ch in range(c):
                for y in range(h):
                    for x in range(w):
                        out[ch, i * h + y, j * w + x] = frames[i * m + j, ch, y, x]
    return out


def constant_frames(t, c=1, h=2, w=2):
    return np.stack([np.full((c, h, w), k, np.float32) for k in range(t)])


def block_values(img, rows, cols):
    c, H, W = img.shape
    h, w = H // rows, W // cols
    return [[np.unique(img[:, r * h:(r + 1) * h, q * w:(q + 1) * w]) for q in range(cols)]
            for r in range(rows)]


@pytest.mark.parametrize("t,expected", [(16, (4, 4)), (1, (1, 1)), (9, (3, 3))])
def test_square_grid_for(t, expected):
    assert square_grid_for(t) == expected


def test_square_grid_for_rejects_non_squares():
    with pytest.raises(NotPerfectSquare):
        square_grid_for(12)
    with pytest.raises(ContractError):
        square_grid_for(0)


@pytest.mark.parametrize("k,expected", [(5, (1, 1)), (0, (0, 0)), (15, (3, 3))])
def test_frame_to_block(k, expected):
    assert frame_to_block(k, 4) == (k // 4, k % 4) == expected


def test_frame_to_block_range_and_transpose():
    with pytest.raises(IndexError):
        frame_to_block(16, 4, rows=4)
    with pytest.raises(IndexError):
        frame_to_block(-1, 4)
    # slow index on the width axis
    assert frame_to_block(5, 4, rows=4, transpose=True) == (1, 1)
    assert frame_to_block(1, 4, rows=4, transpose=True) == (1, 0)


def test_row_major_composite_dims():
    frames = np.zeros((16, 3, 224, 224), np.float32)
    assert row_major_flatten(frames, GridSpec(4, 4)).shape == (3, 896, 896)


def test_row_major_single_frame_identity():
    frame = np.random.default_rng(0).normal(size=(1, 3, 5, 7)).astype(np.float32)
    out = row_major_flatten(frame, GridSpec(1, 1))
    np.testing.assert_array_equal(out, frame[0])


def test_row_major_quadrants():
    out = row_major_flatten(constant_frames(4), GridSpec(2, 2))
    vals = block_values(out, 2, 2)
    assert [[v.tolist() for v in row] for row in vals] == [[[0.0], [1.0]], [[2.0], [3.0]]]


def test_row_major_matches_loop_oracle_and_einops():
    rng = np.random.default_rng(3)
    frames = rng.normal(size=(6, 2, 3, 4)).astype(np.float32)
    out = row_major_flatten(frames, GridSpec(2, 3))
    np.testing.assert_array_equal(out, brute_rearrange(frames, 2, 3))
    np.testing.assert_array_equal(out, einops.rearrange(frames, "(n m) c h w -> c (n h) (m w)", n=2, m=3))


def test_transposed_orientation_puts_slow_index_on_width():
    out = row_major_flatten(constant_frames(6), GridSpec(2, 3), transpose=True)
    vals = [[v.item() for v in row] for row in block_values(out, 2, 3)]
    assert vals == [[0, 2, 4], [1, 3, 5]]


def test_row_major_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        row_major_flatten(np.zeros((12, 1, 2, 2)), GridSpec(4, 4))
    with pytest.raises(ShapeMismatch):
        row_major_flatten(np.zeros((4, 1, 2, 2)), GridSpec(2, 2, 3, 3))
    with pytest.raises(ShapeMismatch):
        row_major_flatten(np.zeros((4, 2, 2)), GridSpec(2, 2))


def test_nested_frame_five_lands_at_row0_col3():
    out = nested_flatten(constant_frames(16), 4, (2, 2), (2, 2))
    vals = block_values(out, 4, 4)
    assert vals[0][3].tolist() == [5.0]


def test_nested_two_stage_oracle():
    """Tile each contiguous sub-sequence, then tile the sub-composites."""
    rng = np.random.default_rng(1)
    frames = rng.normal(size=(16, 2, 3, 3)).astype(np.float32)
    subs = [brute_rearrange(frames[n * 4:(n + 1) * 4], 2, 2) for n in range(4)]
    expected = brute_rearrange(np.stack(subs), 2, 2)
    np.testing.assert_array_equal(nested_flatten(frames, 4, (2, 2), (2, 2)), expected)


def test_nested_rectangular_two_stage_oracle():
    rng = np.random.default_rng(2)
    frames = rng.normal(size=(24, 1, 2, 3)).astype(np.float32)
    subs = [brute_rearrange(frames[n * 6:(n + 1) * 6], 2, 3) for n in range(4)]
    expected = brute_rearrange(np.stack(subs), 1, 4)
    np.testing.assert_array_equal(nested_flatten(frames, 4, (2, 3), (1, 4)), expected)
    plan = FlattenPlan(Kind.NESTED, GridSpec(2, 12), nested_n=4, inner_grid=GridSpec(2, 3))
    np.testing.assert_array_equal(flatten(frames, plan).pixels, expected)


@pytest.mark.parametrize("t", [1, 4, 9, 16])
def test_nested_degenerate_cases(t):
    frames = np.random.default_rng(t).normal(size=(t, 1, 3, 3)).astype(np.float32)
    m = math.isqrt(t)
    ref = row_major_flatten(frames, GridSpec(m, m))
    np.testing.assert_array_equal(nested_flatten(frames, 1, (m, m), (1, 1)), ref)
    np.testing.assert_array_equal(nested_flatten(frames, t, (1, 1), (m, m)), ref)


def test_nested_bad_arguments():
    frames = constant_frames(16)
    with pytest.raises(ContractError):
        nested_flatten(frames, 3, (2, 2), (2, 2))
    with pytest.raises(ContractError):
        nested_flatten(frames, 4, (1, 2), (2, 2))
    with pytest.raises(ContractError):
        nested_flatten(frames, 4, (2, 2), (1, 2))


def test_random_identity_matches_row_major():
    frames = np.random.default_rng(0).normal(size=(9, 3, 4, 4)).astype(np.float32)
    out, perm = random_flatten(frames, GridSpec(3, 3), list(range(9)))
    assert perm == tuple(range(9))
    np.testing.assert_array_equal(out, row_major_flatten(frames, GridSpec(3, 3)))


def test_random_reversed_quadrants():
    out, _ = random_flatten(constant_frames(4), GridSpec(2, 2), (3, 2, 1, 0))
    assert [[v.item() for v in row] for row in block_values(out, 2, 2)] == [[3, 2], [1, 0]]


def test_random_seeded_is_deterministic():
    frames = np.random.default_rng(0).normal(size=(4, 1, 3, 3)).astype(np.float32)
    a, pa = random_flatten(frames, GridSpec(2, 2), seed=11)
    b, pb = random_flatten(frames, GridSpec(2, 2), seed=11)
    assert pa == pb == tuple(seeded_permutation(4, 11))
    np.testing.assert_array_equal(a, b)


def test_random_rejects_non_bijection():
    with pytest.raises(InvalidPermutation):
        random_flatten(constant_frames(4), GridSpec(2, 2), (0, 0, 1, 2))
    with pytest.raises(ContractError):
        random_flatten(constant_frames(4), GridSpec(2, 2))


def test_unflatten_examples():
    frames = constant_frames(4)
    plan = FlattenPlan(Kind.ROW_MAJOR, GridSpec(2, 2))
    back = unflatten(flatten(frames, plan))
    assert [f.flat[0] for f in back] == [0, 1, 2, 3]

    one = constant_frames(1)
    np.testing.assert_array_equal(unflatten(flatten(one, FlattenPlan("row-major", GridSpec(1, 1)))), one)

    rplan = FlattenPlan(Kind.RANDOM, GridSpec(2, 2), permutation=(3, 2, 1, 0))
    img = flatten(frames, rplan)
    assert img.pixels[0, 0, 0] == 3
    np.testing.assert_array_equal(unflatten(img.pixels, rplan), frames)


def test_unflatten_errors():
    plan = FlattenPlan(Kind.ROW_MAJOR, GridSpec(2, 2))
    with pytest.raises(ShapeMismatch):
        unflatten(np.zeros((1, 5, 4), np.float32), plan)
    with pytest.raises(ContractError):
        unflatten(np.zeros((1, 4, 4), np.float32))
    with pytest.raises(ContractError):
        FlattenPlan(Kind.RANDOM, GridSpec(2, 2))


def test_random_plan_provenance_carries_permutation():
    plan = FlattenPlan(Kind.RANDOM, GridSpec(3, 3), seed=5)
    img = flatten(constant_frames(9), plan)
    assert img.plan.permutation == tuple(seeded_permutation(9, 5))
    np.testing.assert_array_equal(unflatten(img.pixels, plan), constant_frames(9))


def test_default_nested_n():
    assert default_nested_n(16) == 4
    assert default_nested_n(1) == 1
    assert default_nested_n(81) == 9
    with pytest.raises(ContractError):
        default_nested_n(9)
    assert FlattenPlan(Kind.NESTED, GridSpec(4, 4)).nested_n == 4


def test_plan_dict_round_trip():
    for plan in [
        FlattenPlan(Kind.ROW_MAJOR, GridSpec(4, 4), transpose=True),
        FlattenPlan(Kind.NESTED, GridSpec(4, 4), nested_n=4),
        FlattenPlan(Kind.RANDOM, GridSpec(3, 3), seed=9),
    ]:
        again = FlattenPlan.from_dict(plan.to_dict())
        frames = np.random.default_rng(0).normal(size=(plan.t, 1, 2, 2)).astype(np.float32)
        np.testing.assert_array_equal(flatten(frames, again).pixels, flatten(frames, plan).pixels)


def test_grid_parse():
    assert GridSpec.parse("3x4") == GridSpec(3, 4)
    with pytest.raises(ContractError):
        GridSpec.parse("3by4")
    with pytest.raises(ContractError):
        GridSpec(0, 2)


def _plans_for(t, draw):
    m = math.isqrt(t)
    grid = GridSpec(m, m)
    kind = draw(st.sampled_from(list(Kind)))
    transpose = draw(st.booleans())
    if kind is Kind.ROW_MAJOR:
        return FlattenPlan(kind, grid, transpose=transpose)
    if kind is Kind.RANDOM:
        return FlattenPlan(kind, grid, seed=draw(st.integers(0, 2**64 - 1)), transpose=transpose)
    # any square factorisation m = a*b gives inner a x a, outer b x b
    a = draw(st.sampled_from([d for d in range(1, m + 1) if m % d == 0]))
    return FlattenPlan(kind, grid, nested_n=(m // a) ** 2, transpose=transpose)


@st.composite
def clip_and_plan(draw):
    t = draw(st.sampled_from([1, 4, 9, 16, 25]))
    c = draw(st.sampled_from([1, 3]))
    h, w = draw(st.integers(1, 8)), draw(st.integers(1, 8))
    seed = draw(st.integers(0, 2**32 - 1))
    frames = np.random.default_rng(seed).normal(size=(t, c, h, w)).astype(np.float32)
    return frames, _plans_for(t, draw)


@settings(max_examples=150, deadline=None)
@given(clip_and_plan())
def test_round_trip_and_conservation(case):
    frames, plan = case
    img = flatten(frames, plan)
    assert img.pixels.shape == (frames.shape[1], plan.grid.rows * frames.shape[2],
                                plan.grid.cols * frames.shape[3])
    np.testing.assert_array_equal(unflatten(img, plan), frames)
    assert np.array_equal(np.sort(img.pixels, axis=None), np.sort(frames, axis=None))


@settings(max_examples=50, deadline=None)
@given(st.sampled_from([1, 4, 9, 16, 25]), st.integers(0, 2**64 - 1), st.booleans())
def test_block_locality(t, seed, transpose):
    m = math.isqrt(t)
    frames = constant_frames(t, c=2, h=3, w=2)
    for plan in (FlattenPlan(Kind.RANDOM, GridSpec(m, m), seed=seed, transpose=transpose),
                 FlattenPlan(Kind.ROW_MAJOR, GridSpec(m, m), transpose=transpose)):
        for row in block_values(flatten(frames, plan).pixels, m, m):
            assert all(v.size == 1 for v in row)


def test_flat_image_is_plain_dataclass():
    img = FlatImage(np.zeros((1, 2, 2), np.float32))
    assert img.plan is None
