"""Deterministic, splittable seeding.

All randomness in the library flows through ``seed_key``: it flattens
mixed int/str key paths into a tuple of uint32 words suitable for
numpy's SeedSequence, so independent streams (pretraining, each episode,
each k-means restart) are reproducible and non-overlapping.
"""

from __future__ import annotations

import hashlib

import numpy as np


def seed_key(*parts):
    words = []
    stack = list(parts)
    for p in stack:
        if isinstance(p, (tuple, list)):
            words.extend(seed_key(*p))
        elif isinstance(p, str):
            digest = hashlib.sha256(p.encode("utf-8")).digest()
            words.append(int.from_bytes(digest[:4], "little"))
        elif p is None:
            words.append(0)
        else:
            words.append(int(p) & 0xFFFFFFFF)
    return tuple(words)


def make_rng(*parts):
    return np.random.default_rng(seed_key(*parts))
