"""Hierarchical, reproducible random streams.

A stream is addressed by ``(master_seed, path)``; the path lists integers such
as ``(repetition, fold, learner)``. Identical addresses give identical draws and
distinct paths give independent generators (via ``numpy.random.SeedSequence``
spawn keys).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RngStream:
    master_seed: int
    stream_path: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "stream_path", tuple(int(p) for p in self.stream_path))
        if self.master_seed < 0 or any(p < 0 for p in self.stream_path):
            raise ValueError("seed and stream path entries must be non-negative")

    def child(self, *path: int) -> "RngStream":
        return RngStream(self.master_seed, self.stream_path + tuple(path))

    def seed_sequence(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(entropy=self.master_seed, spawn_key=self.stream_path)

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.seed_sequence()))

    def int_seed(self) -> int:
        # 63-bit seed for consumers that only accept a plain integer (numba kernels).
        return int(self.seed_sequence().generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> np.uint64(1))
