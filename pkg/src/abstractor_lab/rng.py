"""Seeded random streams.

All randomness in the lab flows through :class:`Rng`, which wraps numpy's
Philox counter-based bit generator. Philox output depends only on (key,
counter), so a seed yields the same stream on every platform. Gaussian
draws use Box-Muller on top of the uniform stream rather than numpy's
ziggurat sampler.
"""

from __future__ import annotations

import hashlib

import numpy as np

ALGORITHM = "philox4x64-10"


def _derive(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class Rng:
    """Deterministic random stream identified by a 64-bit seed."""

    algorithm = ALGORITHM

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self._gen = np.random.Generator(np.random.Philox(key=seed))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed})"

    def spawn(self, label: str | int) -> "Rng":
        """Independent child stream; depends only on (seed, label), not on draws so far."""
        return Rng(_derive(self.seed, str(label)))

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def normal(self, size, scale: float = 1.0) -> np.ndarray:
        """Standard normal samples (times ``scale``) via Box-Muller, float64."""
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        # 1 - U lies in (0, 1], keeping log finite
        u1 = 1.0 - self._gen.random(pairs)
        u2 = self._gen.random(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return (z[:n] * scale).reshape(shape)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def permutation(self, n) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def random(self, size=None):
        return self._gen.random(size)
