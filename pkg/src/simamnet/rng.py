"""Named random streams derived from one root seed."""
from __future__ import annotations

import zlib

import numpy as np


def derive_rng(root_seed: int, label: str, *index: int) -> np.random.Generator:
    """Independent generator for (root seed, component label, indices).

    The same triple always yields the same stream, regardless of call order.
    """
    if root_seed < 0 or any(i < 0 for i in index):
        raise ValueError("seeds and stream indices must be non-negative")
    key = zlib.crc32(label.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(root_seed), key, *map(int, index)]))
