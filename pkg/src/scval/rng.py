"""Seeded random-number streams.

Every stochastic component draws from a named sub-stream derived from one
global seed, so independent components never share or race on generator
state and any single piece of output can be reproduced in isolation.
"""

import zlib

import numpy as np


def substream(seed: int, *labels) -> np.random.Generator:
    """Return a generator for the sub-stream identified by ``labels``.

    Labels may be strings (hashed stably) or plain ints (used as-is), so
    ``substream(seed, "noise", entry, repeat)`` is reproducible across
    runs, platforms, and worker counts.
    """
    keys = [int(seed) & 0xFFFFFFFF]
    for label in labels:
        if isinstance(label, (int, np.integer)):
            keys.append(int(label) & 0xFFFFFFFF)
        else:
            keys.append(zlib.crc32(str(label).encode("utf-8")))
    return np.random.default_rng(keys)
