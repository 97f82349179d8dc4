"""Seed derivation and generator construction.

Every random stream in the package comes from a master integer seed plus a
purpose tag.  Child seeds are derived by hashing, so adding a new consumer
never shifts the draws seen by an existing one.
"""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *tags: object) -> int:
    """Hash ``(seed, *tags)`` to a 64-bit child seed."""
    h = hashlib.blake2b(digest_size=8)
    h.update(repr(int(seed)).encode())
    for tag in tags:
        h.update(b"\x1f")
        h.update(repr(tag).encode())
    return int.from_bytes(h.digest(), "little")


def generator(seed: int, *tags: object) -> np.random.Generator:
    """Counter-based (Philox) generator for the stream ``(seed, *tags)``."""
    return np.random.Generator(np.random.Philox(derive_seed(seed, *tags)))
