"""Deterministic random-stream derivation.

Every random draw in the package flows from a single root seed.  A
substream is addressed by a path of labels, for example::

    gen = generator(seed, "sequential", trial, "stage", t, "pool")

String labels are hashed (sha256, first four bytes) to 32-bit integers and
the whole path becomes a ``numpy.random.SeedSequence`` spawn key, so any
stream can be reconstructed independently of execution order.  Integer
labels are used directly.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_part(part) -> int:
    if isinstance(part, (bool, float)):
        raise TypeError(f"stream labels must be int or str, got {part!r}")
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"integer stream labels must be non-negative, got {part}")
        return int(part) % (2**32)
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def seed_sequence(root_seed: int, *path) -> np.random.SeedSequence:
    """SeedSequence for the substream addressed by ``path`` under ``root_seed``."""
    return np.random.SeedSequence(int(root_seed), spawn_key=tuple(_key_part(p) for p in path))


def generator(root_seed: int, *path) -> np.random.Generator:
    """PCG64 generator for the substream addressed by ``path``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(root_seed, *path)))
