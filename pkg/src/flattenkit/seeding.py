"""splitmix64 stream and the seed-derivation helpers built on it.

Permutations produced here are part of the on-disk contract (composites must be
reproducible in any language), so the generator is spelled out instead of
delegating to numpy.
"""

from __future__ import annotations

from typing import Iterator

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def splitmix64(seed: int) -> Iterator[int]:
    """Yield the successor stream of ``seed`` (first value is mix(seed + gamma))."""
    state = seed & MASK64
    while True:
        state = (state + GOLDEN_GAMMA) & MASK64
        yield _mix(state)


def derive_seed(seed: int, index: int) -> int:
    """Child seed for item ``index``: first splitmix64 output of ``seed XOR index``."""
    return next(splitmix64((seed ^ index) & MASK64))


def seeded_permutation(t: int, seed: int) -> list[int]:
    """Fisher-Yates (Durstenfeld, descending) shuffle of ``range(t)``.

    For i = t-1 .. 1 the swap partner is ``next() % (i + 1)``.
    """
    perm = list(range(t))
    stream = splitmix64(seed)
    for i in range(t - 1, 0, -1):
        j = next(stream) % (i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return perm
