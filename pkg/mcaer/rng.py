"""
Splittable seeded random streams.

Every stochastic operation takes an explicit `numpy.random.Generator`. Streams are
derived from a root seed and a path of keys, so the same (seed, keys) pair always
yields the same draws no matter which thread or in which order it is requested.
"""
import zlib

import numpy as np


def _key_to_int(key):
    if isinstance(key, (int, np.integer)):
        return int(key)
    return zlib.crc32(str(key).encode())


def stream(seed, *keys) -> np.random.Generator:
    sequence = np.random.SeedSequence(int(seed), spawn_key=tuple(_key_to_int(key) for key in keys))
    return np.random.Generator(np.random.PCG64(sequence))
