"""Seed fan-out.

All randomness uses numpy's PCG64 bit generator, whose output stream is
fixed across platforms for a given seed. Sub-seeds are derived from a
top-level seed and a purpose string via SHA-256, so adding a new consumer
never perturbs the streams of existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *purpose: object) -> int:
    key = "\x1f".join([str(int(seed))] + [str(p) for p in purpose]).encode("utf-8")
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


def rng_for(seed: int, *purpose: object) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *purpose)))


def stable_key(seed: int, item: str) -> int:
    """64-bit sort key that depends only on (seed, item)."""
    return derive_seed(seed, "key", item)
