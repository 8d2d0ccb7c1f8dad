"""Deterministic seed derivation and RNG construction.

A single base seed governs a run. Every internal consumer derives its own
stream by stable hashing of (seed, purpose labels), so results never depend
on scheduling or on the order in which components happen to draw randomness.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(base_seed: int, *labels: object) -> int:
    """Derive a 63-bit sub-seed from a base seed and a sequence of labels.

    Uses SHA-256 so the mapping is stable across platforms and processes.
    """
    h = hashlib.sha256()
    h.update(str(int(base_seed)).encode("utf-8"))
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "big") >> 1


def make_rng(base_seed: int, *labels: object) -> np.random.Generator:
    """A numpy Generator seeded from (base_seed, labels)."""
    seed = derive_seed(base_seed, *labels) if labels else int(base_seed)
    return np.random.default_rng(seed)


def torch_generator(base_seed: int, *labels: object) -> torch.Generator:
    """A torch Generator seeded from (base_seed, labels)."""
    seed = derive_seed(base_seed, *labels) if labels else int(base_seed)
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen
