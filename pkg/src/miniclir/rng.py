"""Deterministic RNG streams.

Every random draw in the package flows from a single integer seed. Distinct
phases (corpus generation, init, per-batch masking, shuffling, ...) get
independent streams derived from (seed, label, *indices), so adding draws to
one phase never perturbs another.
"""

import zlib

import numpy as np


def derive_rng(seed: int, label: str, *indices: int) -> np.random.Generator:
    """Generator for the stream identified by (seed, label, indices)."""
    key = [seed & 0xFFFFFFFF, zlib.crc32(label.encode("utf-8"))]
    key.extend(i & 0xFFFFFFFF for i in indices)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))
