"""Seed-reproducible random numbers.

Everything random in this package flows through :class:`Stream`, a
counter-based generator built on the SplitMix64 mixing function: draw ``i``
of a stream seeded with ``s`` is ``mix64(s + (i+1) * GOLDEN)``.  Outputs
depend only on ``(seed, counter)``, so results are bit-identical across
platforms and never touch process-global state.  Normal deviates use the
Box-Muller transform on top of the uniform stream.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)

# FNV-1a 64-bit, used to fold strings/ints into derived seeds.
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def mix64(x):
    """SplitMix64 finalizer. Accepts and returns uint64 scalars or arrays."""
    z = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return z


def fold(*parts) -> int:
    """Fold ints and strings into one 64-bit seed, deterministically.

    Used to derive independent sub-seeds, e.g. ``fold(base_seed, epoch, i)``
    for per-sample augmentation or ``fold(seed, param_name)`` for per-layer
    initialization, so results do not depend on draw ordering.
    """
    h = _FNV_OFFSET
    for part in parts:
        if isinstance(part, str):
            data = part.encode("utf-8")
        elif isinstance(part, (int, np.integer)):
            data = int(part).to_bytes(8, "little", signed=False) if part >= 0 else \
                (int(part) & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little")
        else:
            raise TypeError(f"fold() accepts ints and strings, got {type(part)!r}")
        for b in data:
            h ^= b
            h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return int(mix64(np.uint64(h)))


class Stream:
    """Counter-based random stream with a fixed, documented algorithm."""

    def __init__(self, seed: int):
        self._seed = np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)
        self._pos = 0

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._pos + 1, self._pos + n + 1, dtype=np.uint64)
        self._pos += n
        with np.errstate(over="ignore"):
            return mix64(self._seed + idx * _GOLDEN)

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1), from the top 53 bits of each draw."""
        bits = self._raw(n) >> np.uint64(11)
        return bits.astype(np.float64) * (2.0 ** -53)

    def normal(self, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """n standard-normal deviates (Box-Muller), scaled to (mean, std)."""
        if std < 0:
            raise ValueError(f"normal std must be >= 0, got {std}")
        m = (n + 1) // 2
        u1 = self.uniform(m)
        u2 = self.uniform(m)
        # 1-u1 lies in (0, 1], so the log never sees zero.
        r = np.sqrt(-2.0 * np.log1p(-u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return mean + std * z

    def integers(self, lo: int, hi: int, n: int | None = None):
        """Integers in [lo, hi). Scalar when n is None."""
        if hi <= lo:
            raise ValueError(f"empty integer range [{lo}, {hi})")
        m = 1 if n is None else n
        vals = lo + np.floor(self.uniform(m) * (hi - lo)).astype(np.int64)
        return int(vals[0]) if n is None else vals

    def coin(self) -> bool:
        return bool(self.uniform(1)[0] < 0.5)

    def permutation(self, n: int) -> np.ndarray:
        """Random permutation of range(n) via argsort of uniform keys."""
        return np.argsort(self.uniform(n), kind="stable")
