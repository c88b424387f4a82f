"""Splittable seed derivation.

Every stage of a run gets its own seed from ``derive_seed(master, name)``.
The derived value depends only on the master seed and the stage name, never
on the order in which stages execute, so any single stage can be re-run in
isolation and reproduce its original output.

The scheme feeds ``[master, crc32(name_0), crc32(name_1), ...]`` into a
numpy ``SeedSequence`` and takes the first 63 bits of its output state.
"""
from __future__ import annotations

import zlib

import numpy as np
import torch


def derive_seed(master: int, *names: str | int) -> int:
    words = [int(master) & 0xFFFFFFFF, (int(master) >> 32) & 0xFFFFFFFF]
    for name in names:
        words.append(zlib.crc32(str(name).encode("utf-8")))
    state = np.random.SeedSequence(words).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & ((1 << 63) - 1)


def torch_generator(seed: int) -> torch.Generator:
    gen = torch.Generator(device="cpu")
    gen.manual_seed(int(seed))
    return gen
