from __future__ import annotations

import zlib

import numpy as np


def named_rng(seed: int, *names) -> np.random.Generator:
    """Independent generator for the sub-stream ``names`` of ``seed``."""
    entropy = [int(seed)] + [n if isinstance(n, int) and n >= 0 else zlib.crc32(str(n).encode("utf-8"))
                             for n in names]
    return np.random.default_rng(entropy)
