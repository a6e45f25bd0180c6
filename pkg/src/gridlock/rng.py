"""Seed handling: counter-based Philox streams and labeled sub-seeds."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, label: str) -> int:
    """Stable 64-bit sub-seed for a named stage.

    Adding a new label never shifts the seeds of existing ones.
    """
    digest = hashlib.blake2b(f"{int(seed)}:{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def make_rng(seed: int, label: str | None = None) -> np.random.Generator:
    if label is not None:
        seed = derive_seed(seed, label)
    return np.random.Generator(np.random.Philox(int(seed) % 2**64))
