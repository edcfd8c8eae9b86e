"""Deterministic random streams built on splitmix64.

Every source of randomness in the package is derived from a single integer
seed through this module.  Streams are counter-based: draw ``i`` of a stream
is ``mix64(seed + (i+1) * GOLDEN)``, so block draws vectorise over numpy
uint64 arrays and two streams created from the same seed words are
bit-identical regardless of platform.
"""

from __future__ import annotations

import math

import numpy as np

_GOLDEN = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1
_INV_2_53 = float(2.0 ** -53)


def mix64(z: int) -> int:
    """splitmix64 finalizer on a python int (mod 2**64)."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) & _MASK


def _mix64_array(z: np.ndarray) -> np.ndarray:
    # numpy uint64 arithmetic wraps mod 2**64, matching mix64 above
    z = z.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= np.uint64(0xBF58476D1CE4E5B9)
    z ^= z >> np.uint64(27)
    z *= np.uint64(0x94D049BB133111EB)
    z ^= z >> np.uint64(31)
    return z


def derive_seed(*words: int) -> int:
    """Fold an ordered tuple of integer words into one 64-bit stream seed."""
    h = 0
    for w in words:
        h = mix64(h ^ mix64((int(w) + _GOLDEN) & _MASK))
    return h


class Rng:
    """Counter-based splitmix64 stream seeded from integer words.

    ``Rng(seed, epoch, sample_index, view_index)`` is the per-sample stream
    convention used by the augmentation pipeline.
    """

    def __init__(self, *words: int):
        self._seed = derive_seed(*words)
        self._count = 0

    def split(self, *words: int) -> "Rng":
        """Derive an independent child stream."""
        return Rng(self._seed, *words)

    def u64(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit draws as a uint64 array."""
        idx = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
        self._count += n
        return _mix64_array(np.uint64(self._seed) + idx * np.uint64(_GOLDEN))

    def uniform(self, n: int | None = None, lo: float = 0.0, hi: float = 1.0):
        """Uniform floats in [lo, hi); scalar when n is None."""
        m = 1 if n is None else int(n)
        u = (self.u64(m) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        out = lo + (hi - lo) * u
        return float(out[0]) if n is None else out

    def normal(self, shape, dtype=np.float64) -> np.ndarray:
        """Standard normal draws via Box-Muller."""
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        # map to (0, 1] so log never sees zero
        u1 = ((self.u64(pairs) >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
        u2 = (self.u64(pairs) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * math.pi) * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape).astype(dtype)

    def randint(self, bound: int) -> int:
        """One integer in [0, bound)."""
        if bound <= 0:
            raise ValueError("randint bound must be positive")
        return int(self.u64(1)[0] % np.uint64(bound))

    def bernoulli(self, p: float) -> bool:
        return self.uniform() < p

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) (argsort of random keys)."""
        return np.argsort(self.u64(n), kind="stable")
