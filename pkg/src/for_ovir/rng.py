"""Seeded, splittable random streams.

Every stochastic step in the pipeline asks for a named child stream instead of
sharing one global generator, so results do not depend on call order.
"""
from __future__ import annotations

import zlib

import numpy as np
import torch


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


class RngStream:
    """A node in a tree of seeded generators addressed by name paths."""

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(path)

    def child(self, *parts) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(parts))

    def _seq(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(self.seed, spawn_key=tuple(_key(p) for p in self.path))

    def numpy(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self._seq()))

    def torch(self) -> torch.Generator:
        g = torch.Generator()
        g.manual_seed(int(self._seq().generate_state(1, np.uint64)[0] >> np.uint64(1)))
        return g

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={self.path})"
