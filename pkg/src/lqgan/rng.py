"""Named, independent random streams.

Every consumer (weight init, generator noise, dataset shuffling, gradient
penalty interpolation, ...) draws from its own Philox stream keyed by
``(seed, name)``. Adding a new consumer never shifts the numbers another
consumer sees.
"""

from __future__ import annotations

import zlib

import numpy as np


def _name_key(name: str) -> tuple[int, ...]:
    # crc32 is stable across interpreter runs, unlike hash()
    return tuple(zlib.crc32(part.encode()) for part in name.split("/"))


def stream(seed: int, name: str) -> np.random.Generator:
    """Return the generator for consumer ``name`` under ``seed``.

    Names may be hierarchical (``"init/critic"``); each path component
    extends the spawn key.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=_name_key(name))
    return np.random.Generator(np.random.Philox(ss))


class Streams:
    """Lazily created, cached named streams for one run."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._cache: dict[str, np.random.Generator] = {}

    def __getitem__(self, name: str) -> np.random.Generator:
        gen = self._cache.get(name)
        if gen is None:
            gen = self._cache[name] = stream(self.seed, name)
        return gen

    def fork(self, name: str) -> np.random.Generator:
        """Fresh generator for ``name``, not shared with the cache."""
        return stream(self.seed, name)
