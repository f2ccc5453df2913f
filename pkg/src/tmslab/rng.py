"""Named random streams.

Every random draw in the lab comes from a generator keyed by
``(global seed, purpose tag, *indices)``, so results do not depend on the
order in which independent pieces of work are executed.
"""
from __future__ import annotations

import zlib

import numpy as np


def _tag_key(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def stream(seed: int, tag: str, *indices: int | str) -> np.random.Generator:
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, _tag_key(tag)]
    for idx in indices:
        if isinstance(idx, str):
            key.append(_tag_key(idx))
        else:
            key.append(int(idx) & 0xFFFFFFFFFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(key))
