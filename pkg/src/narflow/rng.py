"""Seedable, splittable randomness built on the Philox counter-based generator.

Every consumer derives its own stream with ``spawn(tag)``, so adding a new
randomness consumer never perturbs existing streams and whole runs replay
from a single seed.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import tensor as T


def _derive_key(seed: int, path: tuple[str, ...]) -> int:
    h = hashlib.sha256(("/".join((str(seed),) + path)).encode("utf-8")).digest()
    return int.from_bytes(h[:16], "little")


class RandomSource:
    def __init__(self, seed: int, _path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = _path
        self._gen = np.random.Generator(np.random.Philox(key=_derive_key(self.seed, _path)))

    def spawn(self, tag: str) -> "RandomSource":
        """Independent child stream, deterministic in (seed, tag path)."""
        return RandomSource(self.seed, self.path + (str(tag),))

    def normal(self, shape, std: float = 1.0, dtype=None) -> np.ndarray:
        dtype = dtype or T.default_dtype()
        return (self._gen.standard_normal(size=shape) * std).astype(dtype)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def bernoulli(self, shape, p: float) -> np.ndarray:
        return self._gen.random(size=shape) < p

    def normal_tensor(self, shape, std: float = 1.0) -> T.Tensor:
        return T.Tensor(self.normal(shape, std))
