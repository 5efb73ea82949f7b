"""Component seeds derived from one run seed.

``derive_seed(seed, name)`` is the first 8 bytes (big-endian) of
SHA-256 over ``f"{seed}:{name}"``, so every consumer of randomness gets an
independent, reproducible stream.
"""

import hashlib

import numpy as np


def derive_seed(seed: int, component: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}:{component}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def rng_for(seed: int, component: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, component))
