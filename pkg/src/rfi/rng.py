"""Named, splittable random streams.

Every random draw in the package comes from ``substream(seed, name, *keys)``.
Streams are counter-based (Philox) and keyed by a stable hash of the name, so
the draws for sample 17 of the "attack" stream never depend on how many other
streams were consumed first or in which order parallel workers ran.
"""

import zlib

import numpy as np


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(_name_key(name), *map(int, keys)))
    return np.random.Generator(np.random.Philox(ss))
