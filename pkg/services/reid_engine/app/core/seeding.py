"""
RTRL DESK - Named random streams

All randomness in a run flows from one integer seed. Each consumer asks for a
generator by stream name plus keys (parameter name, iteration, trial...), so
changing one consumer never shifts the draws of another.
"""

import zlib
from typing import Union

import numpy as np

from app.core.errors import ContractError

STREAMS = ("init", "dropout", "sampling", "splits", "synth")


def _key_entropy(key: Union[str, int]) -> int:
    if isinstance(key, (int, np.integer)) and key >= 0:
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


class SeedStreams:
    def __init__(self, seed: int):
        self.seed = int(seed)

    def generator(self, stream: str, *keys: Union[str, int]) -> np.random.Generator:
        if stream not in STREAMS:
            raise ContractError(f"unknown random stream '{stream}' (expected one of {STREAMS})")
        entropy = [self.seed, _key_entropy(stream)] + [_key_entropy(k) for k in keys]
        return np.random.default_rng(np.random.SeedSequence(entropy))

    def __repr__(self) -> str:
        return f"SeedStreams(seed={self.seed})"
