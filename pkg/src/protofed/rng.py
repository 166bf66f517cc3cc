"""Deterministic seed derivation.

Every random draw in a run flows from one master seed through integer key
paths, so worker parallelism and call order cannot change results.
"""

from __future__ import annotations

import numpy as np

# Stream ids reserved for the run-level derivations.
STREAM_INIT = 0
STREAM_DATA = 1
STREAM_PARTITION = 2
STREAM_CLIENT = 3
STREAM_KMEANS = 4


def derive_seed(*keys: int) -> int:
    """Mix integer keys into a stable 64-bit seed."""
    ss = np.random.SeedSequence([int(k) for k in keys])
    return int(ss.generate_state(1, np.uint64)[0])


def rng_from(*keys: int) -> np.random.Generator:
    """Generator seeded from the mixed key path."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))
