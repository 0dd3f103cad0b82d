"""All randomness flows from one global seed through named substreams."""

from __future__ import annotations

import zlib

import numpy as np


def substream_seed(global_seed: int, name: str, *indices: int) -> int:
    """Stable 63-bit seed for the (name, *indices) substream of global_seed."""
    key = (zlib.crc32(name.encode()),) + tuple(int(i) for i in indices)
    ss = np.random.SeedSequence(entropy=int(global_seed), spawn_key=key)
    state = ss.generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


def substream(global_seed: int, name: str, *indices: int) -> np.random.Generator:
    return np.random.default_rng(substream_seed(global_seed, name, *indices))
