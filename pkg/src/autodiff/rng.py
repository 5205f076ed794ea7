"""Seeded, splittable random streams.

Algorithm: numpy's PCG64 (PCG XSL RR 128/64) bit generator, seeded through
``numpy.random.SeedSequence(entropy=seed, spawn_key=stream)``. Both are
specified by numpy independently of the platform, so the same
``(seed, stream)`` pair yields the same numbers everywhere.

A stream is a tuple of non-negative ints. The trainer uses
``(epoch, batch, replicate)`` style keys; ``child`` appends to the key, so
sub-streams never collide with their parent.
"""
from __future__ import annotations

import numpy as np

ALGORITHM = "PCG64 via SeedSequence(entropy=seed, spawn_key=stream)"


class Rng:
    __slots__ = ("seed", "stream", "_generator")

    def __init__(self, seed: int, stream: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2 ** 64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        if any(k < 0 for k in stream):
            raise ValueError(f"stream keys must be non-negative, got {stream}")
        self.seed = int(seed)
        self.stream = tuple(int(k) for k in stream)
        self._generator: np.random.Generator | None = None

    def child(self, *key: int) -> "Rng":
        """Independent sub-stream. Doesn't touch this stream's state."""
        return Rng(self.seed, self.stream + tuple(key))

    @property
    def generator(self) -> np.random.Generator:
        # Built lazily; plenty of Rngs only ever get split, never drawn from.
        if self._generator is None:
            sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.stream)
            self._generator = np.random.Generator(np.random.PCG64(sequence))
        return self._generator

    def random(self, shape, dtype=np.float64) -> np.ndarray:
        return self.generator.random(shape).astype(dtype, copy=False)

    def bernoulli(self, shape, p: float, dtype=np.float32) -> np.ndarray:
        """0/1 array, each entry 1 with probability ``p``."""
        return (self.generator.random(shape) < p).astype(dtype)

    def uniform(self, low: float, high: float, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, scale: float, shape) -> np.ndarray:
        return self.generator.normal(0.0, scale, shape)

    def integers(self, low: int, high: int, size=None):
        """Uniform ints in ``[low, high)``."""
        return self.generator.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"
