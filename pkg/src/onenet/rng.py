"""Deterministic counter-based random streams.

Every random draw in the toolkit goes through :class:`Rng`. Streams are
Philox4x64 generators keyed by a SeedSequence hash of ``(seed, *keys)``,
so the bits depend only on the integers involved, never on the platform
or on how many other streams were drawn from first.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("stream keys must be non-negative")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


class Rng:
    def __init__(self, seed: int, *keys):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.keys = tuple(keys)
        entropy = [self.seed, *(_key_int(k) for k in keys)]
        ss = np.random.SeedSequence(entropy)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *keys) -> "Rng":
        """Independent stream addressed by ``keys`` beneath this one."""
        return Rng(self.seed, *self.keys, *keys)

    @property
    def counter(self) -> tuple[int, ...]:
        return tuple(int(c) for c in self._gen.bit_generator.state["state"]["counter"])

    def normal(self, size, std=1.0, dtype=np.float64) -> np.ndarray:
        return (self._gen.standard_normal(size) * std).astype(dtype, copy=False)

    def uniform(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, keys={self.keys})"
