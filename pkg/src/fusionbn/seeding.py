"""Deterministic seed derivation.

Every random decision in the package flows from one user-facing seed.
Sub-streams are derived by hashing (seed, purpose) so that adding a new
consumer never perturbs existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, purpose: str) -> int:
    """Return a 64-bit sub-seed for `purpose`, stable across platforms."""
    digest = hashlib.sha256(f"{seed}:{purpose}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(seed: int, purpose: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, purpose))
