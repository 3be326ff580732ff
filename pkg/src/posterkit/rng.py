"""Named counter-based random streams.

Every stochastic draw in the pipeline comes from a stream identified by
(seed, name). Streams are keyed by a hash of the name, so draws are
reproducible and independent of the order in which other streams are used.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _key(seed: int, name: str) -> np.ndarray:
    digest = hashlib.blake2b(f"{seed}\x1f{name}".encode(), digest_size=16).digest()
    return np.frombuffer(digest, dtype=np.uint64).copy()


class RngStream:
    """A deterministic stream of draws; each draw gets a disjoint counter block."""

    def __init__(self, seed: int, name: str):
        self.seed = seed
        self.name = name
        self._key = _key(seed, name)
        self._draw = 0

    def _next_gen(self) -> np.random.Generator:
        counter = np.array([0, 0, 0, self._draw], dtype=np.uint64)
        self._draw += 1
        return np.random.Generator(np.random.Philox(key=self._key, counter=counter))

    def normal(self, shape=(), dtype=np.float32):
        return self._next_gen().standard_normal(size=shape, dtype=np.float64).astype(dtype)

    def uniform(self, low=0.0, high=1.0, shape=()):
        return self._next_gen().uniform(low, high, size=shape)

    def integers(self, low, high=None, shape=()):
        return self._next_gen().integers(low, high, size=shape)

    def choice(self, n, size, replace=False):
        return self._next_gen().choice(n, size=size, replace=replace)


def derive_seed(seed: int, name: str) -> int:
    """A child seed for per-sample / per-worker derivation."""
    return int(_key(seed, name)[0] % np.uint64(2**63))
