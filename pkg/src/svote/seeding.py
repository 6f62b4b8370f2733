"""Stable sub-seed derivation.

One master seed drives an experiment; every consumer (data generation,
partitioning, per-client init/training/gating, topology) gets its own stream
derived from (master, purpose label, optional ids). Derivation is a SHA-256
hash, so adding clients or new purposes never perturbs existing streams.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, label: str, *ids: int) -> int:
    """Derive a 64-bit sub-seed from the master seed, a purpose label, and ids."""
    key = ":".join([str(master), label, *(str(i) for i in ids)])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def derive_rng(master: int, label: str, *ids: int) -> np.random.Generator:
    """Fresh numpy Generator for the derived sub-seed."""
    return np.random.default_rng(derive_seed(master, label, *ids))
