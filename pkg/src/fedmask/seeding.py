"""Keyed random streams.

Every stochastic operation derives its own generator from a base seed plus a
string/int key path instead of consuming a shared stream. Two runs that share
(seed, key path) get bit-identical draws, and unrelated operations cannot
perturb each other's randomness no matter what order they execute in.
"""

from __future__ import annotations

import zlib

import numpy as np


def _part_to_int(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    if isinstance(part, str):
        return zlib.crc32(part.encode())
    raise TypeError(f"seed key parts must be int or str, got {type(part)}")


def seed_sequence(seed: int, *key) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF] + [_part_to_int(p) for p in key])


def rng_for(seed: int, *key) -> np.random.Generator:
    """Generator for one keyed stream, e.g. rng_for(seed, 'shuffle', rnd, cid, epoch)."""
    return np.random.default_rng(seed_sequence(seed, *key))


def derive_seed(seed: int, *key) -> int:
    """Collapse a keyed stream into a plain integer seed."""
    return int(seed_sequence(seed, *key).generate_state(1)[0])
