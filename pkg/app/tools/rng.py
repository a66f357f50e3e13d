# app/tools/rng.py
"""
Seeded randomness. PCG64 streams are bit-reproducible across platforms for a
given seed; child streams come from SeedSequence spawn keys so that adding or
removing one consumer never shifts another consumer's draws.
"""
from __future__ import annotations

import numpy as np

from app.tools.tensor import Tensor

_SEED_MASK = (1 << 64) - 1


class Rng:
    def __init__(self, seed: int, spawn_key: tuple = ()):
        self.seed = int(seed) & _SEED_MASK
        self.spawn_key = tuple(spawn_key)
        self._gen = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)))
        self.draws = 0
        self._children = 0

    def normal(self, shape, loc: float = 0.0, scale: float = 1.0) -> np.ndarray:
        out = self._gen.normal(loc, scale, size=shape)
        self.draws += int(np.prod(shape, dtype=np.int64))
        return out

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        out = self._gen.uniform(low, high, size=shape)
        self.draws += int(np.prod(shape, dtype=np.int64))
        return out

    def permutation(self, n: int) -> np.ndarray:
        self.draws += n
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        self.draws += 1 if size is None else int(np.prod(size, dtype=np.int64))
        return self._gen.integers(low, high, size=size)

    def spawn(self, n: int) -> list["Rng"]:
        """`n` independent child streams; successive calls give fresh children."""
        start = self._children
        self._children += n
        return [Rng(self.seed, self.spawn_key + (start + k,)) for k in range(n)]

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, spawn_key={self.spawn_key}, draws={self.draws})"


def seeded_rng(seed: int) -> Rng:
    return Rng(seed)


def gaussian_draw(rng: Rng, shape) -> Tensor:
    return Tensor(rng.normal(shape))


def uniform_draw(rng: Rng, shape) -> Tensor:
    return Tensor(rng.uniform(shape))
