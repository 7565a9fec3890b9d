from __future__ import annotations

import zlib

import numpy as np


def _key(name) -> int:
    if isinstance(name, int):
        return name
    return zlib.crc32(str(name).encode())


class Rng:
    """Seeded random stream with side-effect-free child streams.

    ``child(name)`` derives a new stream from the seed and the name path only,
    so creating children never advances this stream and the same path always
    yields the same numbers.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def child(self, name) -> "Rng":
        return Rng(self.seed, self.path + (_key(name),))

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self.generator.choice(a, size=size, replace=replace)
