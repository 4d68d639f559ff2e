"""Counter-based random streams.

Every stream is identified by (seed, path). The same identity always
produces the same draw sequence, and distinct paths give statistically
independent sequences, so width-N sampling can hand stream i to
trajectory i and get results that do not depend on scheduling order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_to_int(label) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError("stream labels must be non-negative")
        return int(label)
    digest = hashlib.blake2b(str(label).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class RngStream:
    """A named, reproducible source of random draws (Philox counter RNG)."""

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(_label_to_int(p) for p in path)
        self.counter = 0
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def stream(self, *labels) -> "RngStream":
        """Derive an independent child stream; labels may be ints or strings."""
        return RngStream(self.seed, self.path + tuple(labels))

    def normal(self, shape=(), dtype=np.float32) -> np.ndarray:
        out = self._gen.standard_normal(size=shape, dtype=dtype)
        self.counter += int(np.prod(shape, dtype=np.int64)) if shape else 1
        return out

    def uniform(self, shape=()) -> np.ndarray:
        out = self._gen.random(size=shape)
        self.counter += int(np.prod(shape, dtype=np.int64)) if shape else 1
        return out

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        out = self._gen.integers(low, high, size=size)
        self.counter += 1 if size is None else int(np.prod(size, dtype=np.int64))
        return out

    def permutation(self, n: int) -> np.ndarray:
        self.counter += int(n)
        return self._gen.permutation(n)

    def shuffle(self, seq: list) -> None:
        self.counter += len(seq)
        self._gen.shuffle(seq)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self.path}, counter={self.counter})"
