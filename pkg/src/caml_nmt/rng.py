"""Named pseudo-random sub-streams derived from one root seed."""

import zlib

import numpy as np


def stream(seed, name, *keys):
    """Generator for ``(seed, name, *keys)``; independent of call order elsewhere."""
    parts = [int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))]
    parts.extend(int(k) & 0xFFFFFFFF for k in keys)
    return np.random.default_rng(parts)


def derive_seed(seed, name, *keys):
    return int(stream(seed, name, *keys).integers(0, 2**31 - 1))
