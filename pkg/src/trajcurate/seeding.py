"""Deterministic seed derivation so every stage gets an independent stream."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(base: int, *tags) -> int:
    """Stable 63-bit child seed from a base seed and any hashable tags."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(base)).encode())
    for tag in tags:
        h.update(b"/")
        h.update(str(tag).encode())
    return int.from_bytes(h.digest(), "little") & ((1 << 63) - 1)


def rng_for(base: int, *tags) -> np.random.Generator:
    return np.random.default_rng(derive_seed(base, *tags))
