"""Splittable counter-based random streams.

Every sampler in the package takes an explicit generator; independent work
units get disjoint streams derived from (seed, path) so runs are reproducible
regardless of scheduling.
"""

from __future__ import annotations

import numpy as np


def rng_stream(seed: int, *path: int) -> np.random.Generator:
    """Independent Philox stream identified by an integer path under a seed."""
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(seq))
