"""Deterministic RNG derivation from structured seed keys."""

from __future__ import annotations

import numpy as np


def seed_sequence(*keys: int) -> np.random.SeedSequence:
    """SeedSequence keyed by a tuple of integers (order-sensitive)."""
    return np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFF for k in keys])


def rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(*keys))
