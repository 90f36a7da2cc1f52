"""Seeded random-number substreams.

All randomness in the pipeline flows from a single u64 run seed. Each stage
draws from a named substream so that changing one stage's consumption of
randomness cannot reshuffle another stage's draws.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def substream(seed: int, *names: str) -> np.random.Generator:
    """Return a Generator for the substream identified by ``names``.

    The substream key is derived by hashing the joined names, so the mapping
    is stable across runs, platforms and process boundaries.
    """
    digest = hashlib.sha256("/".join(names).encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in (0, 4, 8, 12)]
    return np.random.default_rng(np.random.SeedSequence([int(seed) & _MASK64, *words]))
