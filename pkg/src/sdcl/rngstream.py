"""Counter-based random streams with hierarchical splitting."""

from __future__ import annotations

import numpy as np


def stream(seed: int, *path: int) -> np.random.Generator:
    """Return an independent Philox stream identified by (seed, path).

    The same (seed, path) always yields the same stream; distinct paths give
    statistically independent streams, so data generation, parameter init,
    and evaluation can each own a stream without coordinating draw counts.
    """
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))
