"""Seeded random streams for reproducible, parallel-safe Monte Carlo.

All randomness in the package flows through two primitives:

* ``substream(seed, *key)`` derives an independent counter-based
  (Philox) generator from a root seed and an integer key path.  Jobs
  sharded across workers draw from their own substream, so merged
  results do not depend on worker count or scheduling.
* ``normals(rng, size)`` produces standard normal variates by inversion
  of the uniform stream, which keeps the mapping from raw stream to
  variates simple and platform-stable.
"""

import numpy as np
from scipy.special import ndtri

__all__ = ["substream", "normals", "as_generator"]

# 2**-53: spacing of the uniform grid used for inversion sampling.
_U53 = 1.0 / 9007199254740992.0


def substream(seed, *key):
    """Return a Philox generator derived from ``seed`` and a key path.

    Distinct key tuples give statistically independent streams; the
    derivation is deterministic, so (seed, key) fully identifies every
    variate ever drawn.
    """
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def as_generator(seed_or_rng):
    """Coerce an int seed / SeedSequence / Generator to a Generator."""
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return substream(seed_or_rng)


def normals(rng, size=None):
    """Standard normals via inversion of a strictly interior uniform grid.

    Uniforms are taken as (k + 0.5) * 2**-53 with k drawn from
    [0, 2**53), so 0 and 1 are unreachable and ndtri never overflows.
    """
    k = rng.integers(0, 9007199254740992, size=size, dtype=np.int64)
    return ndtri((k + 0.5) * _U53)
