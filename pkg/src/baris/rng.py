"""Named random streams derived from one integer seed.

``stream(seed, "init/decoder")`` always yields the same generator, and adding
a new purpose string never shifts the numbers another purpose sees.
"""

import hashlib

import numpy as np


def stream_seed(seed: int, purpose: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}\x00{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, purpose: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(seed, purpose))
