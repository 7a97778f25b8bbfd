"""Counter-based seeded randomness with label-keyed substreams.

Every draw is a pure function of ``(seed, labels, counter)``: splitting never
mutates the parent, so two holders of equal streams see equal numbers, and
substreams keyed by e.g. ``("noise", frame, view)`` are order-independent.
"""

from __future__ import annotations

import zlib
from typing import Hashable, Sequence

import numpy as np
import torch


def _label_key(label: Hashable) -> int:
    if isinstance(label, (int, np.integer)) and not isinstance(label, bool):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(repr(label).encode("utf-8"))


class SeededRng:
    def __init__(self, seed: int, path: Sequence[int] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must fit in 64 bits, got {seed}")
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        self.counter = 0

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, path={self.path}, counter={self.counter})"

    def split(self, *labels: Hashable) -> "SeededRng":
        """Independent substream; the parent is left untouched."""
        return SeededRng(self.seed, self.path + tuple(_label_key(lb) for lb in labels))

    def _next_state(self) -> int:
        ss = np.random.SeedSequence(
            entropy=[self.seed & 0xFFFFFFFF, self.seed >> 32],
            spawn_key=self.path + (self.counter,),
        )
        self.counter += 1
        return int(ss.generate_state(1, dtype=np.uint64)[0] & 0x7FFFFFFFFFFFFFFF)

    def generator(self) -> torch.Generator:
        g = torch.Generator(device="cpu")
        g.manual_seed(self._next_state())
        return g

    def numpy(self) -> np.random.Generator:
        return np.random.default_rng(self._next_state())

    def normal(self, shape, dtype=torch.float64) -> torch.Tensor:
        return torch.randn(tuple(shape), generator=self.generator(), dtype=dtype)

    def uniform(self, shape, dtype=torch.float64) -> torch.Tensor:
        return torch.rand(tuple(shape), generator=self.generator(), dtype=dtype)

    def integers(self, low: int, high: int, shape=()) -> torch.Tensor:
        return torch.randint(low, high, tuple(shape), generator=self.generator())
