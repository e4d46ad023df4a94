"""SplitMix64 generator used for every seeded draw in the package.

The stream is counter-based: output ``k`` is ``mix(seed + (k + 1) * GAMMA)``,
so whole blocks are produced with vectorised uint64 arithmetic.
"""
from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Seeded 64-bit generator with numpy-shaped convenience draws."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            k = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
            z = np.uint64(self.seed) + k * _GAMMA
            out = _mix(z)
        self._counter += n
        return out

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64)) if shape != () else 1
        # top 53 bits -> double in [0, 1)
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        u = low + (high - low) * u
        return u.reshape(shape) if shape != () else u[0]

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64)) if shape != () else 1
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform((m,))  # (0, 1]
        u2 = self.uniform((m,))
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        z = mean + std * z
        return z.reshape(shape) if shape != () else z[0]

    def integers(self, low: int, high: int, shape=()):
        """Uniform integers in [low, high)."""
        span = high - low
        if span <= 0:
            raise ValueError(f"empty integer range [{low}, {high})")
        u = self.uniform(shape)
        return (low + np.floor(u * span)).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        keys = self.next_u64(n)
        return np.argsort(keys, kind="stable")

    def spawn(self, tag: int) -> "SplitMix64":
        """Independent child stream keyed by ``tag``."""
        with np.errstate(over="ignore"):
            child = _mix(np.array([self.seed ^ ((int(tag) * 0xD1B54A32D192ED03) & _MASK64)], dtype=np.uint64))
        return SplitMix64(int(child[0]))
