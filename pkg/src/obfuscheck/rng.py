"""Deterministic, splittable random streams.

Every stochastic component draws from an ``RngState`` derived from a 64-bit
master seed plus a path of integer/string tags (example index, restart index,
purpose tag, ...).  Derivation uses a SplitMix64-style mixing hash, so streams
are bit-exact regardless of the order in which workers consume them.
"""

from __future__ import annotations

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def splitmix64(z: int) -> int:
    """SplitMix64 finalizer: one full avalanche round on a 64-bit value."""
    z = (z + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _tag_to_int(tag) -> int:
    if isinstance(tag, str):
        # FNV-1a over UTF-8; documented so other implementations can match it.
        h = _FNV_OFFSET
        for b in tag.encode("utf-8"):
            h = ((h ^ b) * _FNV_PRIME) & _MASK64
        return h
    if isinstance(tag, (int, np.integer)):
        return int(tag) & _MASK64
    raise TypeError(f"seed tag must be int or str, got {type(tag).__name__}")


def mix(master_seed: int, *tags) -> int:
    """Combine a master seed and a tag path into one 64-bit stream seed."""
    h = splitmix64(int(master_seed) & _MASK64)
    for tag in tags:
        h = splitmix64((h ^ _tag_to_int(tag)) & _MASK64)
    return h


class RngState:
    """A counter-tracked random stream backed by PCG64.

    ``draws`` counts the values consumed, so a noise draw can record exactly
    where in the stream it happened (useful when replaying noise).
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._gen = np.random.Generator(np.random.PCG64(self.seed))
        self.draws = 0

    def child(self, *tags) -> "RngState":
        """Derive an independent stream; never advances this one."""
        return RngState(mix(self.seed, *tags))

    def normal(self, shape, dtype=np.float32) -> np.ndarray:
        if dtype == np.float32:
            out = self._gen.standard_normal(size=shape, dtype=np.float32)
        else:
            out = self._gen.standard_normal(size=shape).astype(dtype)
        self.draws += int(np.prod(shape)) if shape else 1
        return out

    def uniform(self, low, high, shape, dtype=np.float32) -> np.ndarray:
        out = self._gen.uniform(low, high, size=shape).astype(dtype)
        self.draws += int(np.prod(shape)) if shape else 1
        return out

    def integers(self, low, high) -> int:
        self.draws += 1
        return int(self._gen.integers(low, high))

    def permutation(self, n: int) -> np.ndarray:
        self.draws += n
        return self._gen.permutation(n)


def derive_rng(master_seed: int, *tags) -> RngState:
    """Convenience: ``RngState`` for a (master_seed, tag path) pair."""
    return RngState(mix(master_seed, *tags))
