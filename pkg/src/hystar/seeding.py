"""Named random sub-streams derived from one run seed."""
from __future__ import annotations

import zlib

import numpy as np
import torch


def substream_seed(seed: int, *names) -> int:
    key = tuple(zlib.crc32(str(n).encode()) for n in names)
    state = np.random.SeedSequence(seed, spawn_key=key).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


def numpy_rng(seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(substream_seed(seed, *names))


def torch_generator(seed: int, *names) -> torch.Generator:
    return torch.Generator().manual_seed(substream_seed(seed, *names))
