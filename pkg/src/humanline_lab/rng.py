"""Per-purpose random streams derived from one master seed.

Each purpose gets its own counter-based Philox generator, so drawing more
samples for one purpose (say, Beta draws) never shifts another stream
(say, data shuffling).
"""

from __future__ import annotations

import zlib

import numpy as np

PURPOSES = ("init", "sampling", "beta", "shuffle", "contexts", "eval", "data")


def _purpose_key(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed: int, purpose: str, *extra: int) -> np.random.Generator:
    """Return an independent generator for ``purpose`` under master ``seed``.

    Extra integers select substreams (per round, per context, ...).
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=(_purpose_key(purpose), *map(int, extra)))
    return np.random.Generator(np.random.Philox(ss))


class Streams:
    """Bundle of named generators for one run."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gens = {p: stream(self.seed, p) for p in PURPOSES}

    def __getitem__(self, purpose: str) -> np.random.Generator:
        if purpose not in self._gens:
            self._gens[purpose] = stream(self.seed, purpose)
        return self._gens[purpose]

    def sub(self, purpose: str, *extra: int) -> np.random.Generator:
        return stream(self.seed, purpose, *extra)
