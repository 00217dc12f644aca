"""Deterministic per-sample random streams."""

import hashlib

import numpy as np

_KEY = b"mfstab-seed-v1"


def derive_seed(master_seed: int, index: int, purpose: str) -> int:
    """Keyed 64-bit hash of (master seed, sample index, purpose tag)."""
    msg = b"%d|%d|%s" % (int(master_seed), int(index), purpose.encode())
    digest = hashlib.blake2b(msg, digest_size=8, key=_KEY).digest()
    return int.from_bytes(digest, "little")


def stream(master_seed: int, index: int, purpose: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, index, purpose))
