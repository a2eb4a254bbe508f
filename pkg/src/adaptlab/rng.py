"""SplitMix64-based deterministic random streams.

Everything that needs randomness (weight init, adapter init, shuffles,
coordinate sampling) draws from here so results depend only on the seed,
never on numpy's global state or generator version.
"""

from __future__ import annotations

import hashlib

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def splitmix64(seed: int, n: int, offset: int = 0) -> np.ndarray:
    """Return outputs ``offset .. offset+n-1`` of the SplitMix64 stream for ``seed``."""
    idx = np.arange(offset + 1, offset + n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed & _MASK64) + idx * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        z = z ^ (z >> np.uint64(31))
    return z


def derive_seed(seed: int, label: str) -> int:
    """Stable 64-bit child seed for a named sub-stream."""
    h = hashlib.sha256(f"{seed & _MASK64}:{label}".encode()).digest()
    return int.from_bytes(h[:8], "little")


class SplitMix64:
    """Sequential generator over a SplitMix64 stream."""

    def __init__(self, seed: int) -> None:
        self.seed = seed & _MASK64
        self._pos = 0

    def _next(self, n: int) -> np.ndarray:
        out = splitmix64(self.seed, n, self._pos)
        self._pos += n
        return out

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in [0, 1) built from the top 53 bits."""
        return (self._next(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        """Gaussian samples via Box-Muller on pairs of uniforms."""
        shape = tuple(np.atleast_1d(shape)) if np.ndim(shape) else (int(shape),)
        size = int(np.prod(shape))
        m = (size + 1) // 2
        u1 = 1.0 - self.uniform(m)  # (0, 1], keeps log finite
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:size]
        return (z * std).reshape(shape)

    def randbelow(self, n: int) -> int:
        return int(self.uniform(1)[0] * n)

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of ``range(n)``."""
        order = list(range(n))
        u = self.uniform(max(n - 1, 0))
        for j, i in enumerate(range(n - 1, 0, -1)):
            k = int(u[j] * (i + 1))
            order[i], order[k] = order[k], order[i]
        return order

    def choice(self, n: int, size: int) -> np.ndarray:
        """``size`` distinct indices from ``range(n)``."""
        return np.array(self.permutation(n)[:size], dtype=np.int64)
