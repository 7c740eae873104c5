"""Deterministic seed derivation: one master seed fans out to named streams."""
from __future__ import annotations

import zlib

import numpy as np
import torch


def derive_seed(seed: int, *keys) -> int:
    words = [int(seed) & 0xFFFFFFFF] + [zlib.crc32(str(k).encode()) for k in keys]
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0] >> 1)


def generator(seed: int, *keys) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(seed, *keys))
