"""Deterministic RNG substream derivation.

Every stochastic routine in the package draws from a Generator derived
here, keyed by (seed, stream id, counters). Identical keys give bit
identical streams on every platform numpy supports.
"""
from __future__ import annotations

import numpy as np

# stream ids; keep stable, they are part of the reproducibility contract
INIT = 1
ITERATION = 2
TRIAL = 3
ELBO_EVAL = 4
PHASE_ORDER = 5
SIM_GLOBAL = 10
SIM_OBS = 11


def substream(*keys: int) -> np.random.Generator:
    """Generator for the substream addressed by the given integer keys."""
    for k in keys:
        if k < 0:
            raise ValueError("substream keys must be non-negative, got %r" % (k,))
    return np.random.default_rng(np.random.SeedSequence(list(keys)))
