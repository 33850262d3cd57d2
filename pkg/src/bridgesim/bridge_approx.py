"""Approximate diffusion bridges by forward/backward crossing.

One copy of the diffusion runs forward from ``a``, an independent copy
runs from ``b`` with its time axis reversed, and the two grids are
scanned for the first sign change of their difference.  Splicing the
forward path before the crossing with the reversed backward path after
it yields a trajectory from ``a`` to ``b``; repeating until a crossing
occurs is the rejection sampler.

Crossing uses weak inequalities, so exact grid equality counts, and a
zero difference at the left endpoint is resolved as the "forward path
above" branch, which keeps the crossing index >= 1 and the first bridge
value equal to ``a``.  Pairs whose paths leave the state interval are
discarded as rejections and reported separately.
"""

from dataclasses import dataclass

import numpy as np

from ._streams import as_generator
from .errors import RejectionBudgetError, UsageError
from .schemes import GridPath, Scheme, require_same_grid, simulate_batch

__all__ = [
    "BridgeSample",
    "BridgeBatch",
    "find_crossing",
    "splice",
    "sample_bridge_approx",
    "sample_bridges",
    "estimate_rejection_prob",
]

MAX_ATTEMPTS_DEFAULT = 10**6
_CHUNK_MIN = 64
_CHUNK_MAX = 65536


@dataclass(frozen=True)
class BridgeSample:
    """An accepted bridge plus how hard it was to get.

    ``attempts`` counts the forward/backward pairs simulated including
    the accepted one; ``boundary_aborts`` counts pairs among those that
    died on the state-interval boundary.
    """

    path: GridPath
    crossing_index: int
    attempts: int
    boundary_aborts: int


@dataclass(frozen=True)
class BridgeBatch:
    """Vectorized result of many accepted bridges on a shared grid."""

    values: np.ndarray          # (n_samples, n_steps + 1)
    crossing_index: np.ndarray  # (n_samples,)
    attempts: np.ndarray        # (n_samples,) pairs per acceptance
    boundary_aborts: np.ndarray # (n_samples,) dead pairs per acceptance
    delta: float

    @property
    def n_samples(self):
        return self.values.shape[0]

    def path(self, i):
        return GridPath(t0=0.0, delta=self.delta, values=self.values[i])


def find_crossing(y1, y2_reversed):
    """First grid index where the forward path crosses the reversed one.

    ``y2_reversed[i]`` must already hold the backward path's value at
    forward time i (i.e. its own time n_steps - i).  Returns None when
    the difference never changes sign weakly.
    """
    require_same_grid(y1, y2_reversed)
    d = y1.values - y2_reversed.values
    hit = d[1:] <= 0.0 if d[0] >= 0.0 else d[1:] >= 0.0
    if not hit.any():
        return None
    return int(np.argmax(hit)) + 1


def splice(y1, y2, nu):
    """Combine forward path and backward path at crossing index ``nu``.

    The result takes the forward values strictly before ``nu`` and the
    time-reversed backward values from ``nu`` on, so its first value is
    y1[0] and its last is y2[0], both bit-exactly.
    """
    require_same_grid(y1, y2)
    n = y1.n_steps
    if not 1 <= nu <= n:
        raise UsageError(f"crossing index {nu} outside 1..{n}")
    out = np.empty(n + 1)
    out[:nu] = y1.values[:nu]
    out[nu:] = y2.values[: n - nu + 1][::-1]
    return GridPath(t0=y1.t0, delta=y1.delta, values=out)


def _splice_rows(y1, y2, nu):
    n = y1.shape[1] - 1
    out = np.empty_like(y1)
    for r in range(y1.shape[0]):
        k = nu[r]
        out[r, :k] = y1[r, :k]
        out[r, k:] = y2[r, : n - k + 1][::-1]
    return out


def _pair_crossings(model, a_vec, b_vec, interval, n_steps, scheme, rng):
    """Simulate one forward/backward pair per row and scan for crossings.

    Returns (y1, y2, dead, has_crossing, nu); dead pairs never cross.
    """
    y1, fail1 = simulate_batch(model, a_vec, interval, n_steps, scheme, rng)
    y2, fail2 = simulate_batch(model, b_vec, interval, n_steps, scheme, rng)
    dead = (fail1 >= 0) | (fail2 >= 0)
    d = y1 - y2[:, ::-1]
    hit = np.where((d[:, :1] >= 0.0), d[:, 1:] <= 0.0, d[:, 1:] >= 0.0)
    hit[dead] = False
    has = hit.any(axis=1)
    nu = hit.argmax(axis=1) + 1
    return y1, y2, dead, has, nu


def sample_bridges(model, a, b, interval, n_steps, scheme, n_samples, rng,
                   max_attempts=MAX_ATTEMPTS_DEFAULT):
    """Draw ``n_samples`` accepted bridges with sequential-stream semantics.

    Pairs are simulated in deterministic chunks and consumed in stream
    order, so attempt counts per acceptance are distributed exactly as
    in the one-at-a-time sampler; results depend only on the generator
    state, not on chunk sizes chosen.
    """
    if n_samples < 1:
        raise UsageError("n_samples must be >= 1")
    rng = as_generator(rng)
    scheme = Scheme.parse(scheme)
    model.require_inside(a, "a")
    model.require_inside(b, "b")

    n_pts = n_steps + 1
    values = np.empty((n_samples, n_pts))
    crossing = np.empty(n_samples, dtype=np.int64)
    attempts = np.empty(n_samples, dtype=np.int64)
    aborts = np.empty(n_samples, dtype=np.int64)

    got = 0
    pending_attempts = 0
    pending_aborts = 0
    pairs_seen = 1.0
    crossings_seen = 1.0  # optimistic prior for chunk sizing
    while got < n_samples:
        rate = max(crossings_seen / pairs_seen, 1.0 / 256.0)
        want = int(np.ceil((n_samples - got) / rate * 1.2))
        chunk = int(np.clip(want, _CHUNK_MIN, _CHUNK_MAX))
        a_vec = np.full(chunk, float(a))
        b_vec = np.full(chunk, float(b))
        y1, y2, dead, has, nu = _pair_crossings(
            model, a_vec, b_vec, interval, n_steps, scheme, rng
        )
        pairs_seen += chunk
        crossings_seen += int(has.sum())

        dead_cum = np.concatenate([[0], np.cumsum(dead)])
        pos = np.flatnonzero(has)
        prev = -1
        for idx in pos:
            if got >= n_samples:
                break
            attempts[got] = pending_attempts + (idx - prev)
            aborts[got] = pending_aborts + dead_cum[idx + 1] - dead_cum[prev + 1]
            pending_attempts = 0
            pending_aborts = 0
            k = nu[idx]
            values[got, :k] = y1[idx, :k]
            values[got, k:] = y2[idx, : n_pts - k][::-1]
            crossing[got] = k
            got += 1
            prev = idx
        if got < n_samples:
            pending_attempts += chunk - (prev + 1)
            pending_aborts += int(dead_cum[chunk] - dead_cum[prev + 1])
            if pending_attempts >= max_attempts:
                raise RejectionBudgetError(
                    f"no crossing in {pending_attempts} attempts "
                    f"({pending_aborts} boundary aborts)",
                    attempts=pending_attempts,
                    boundary_aborts=pending_aborts,
                )
    return BridgeBatch(
        values=values,
        crossing_index=crossing,
        attempts=attempts,
        boundary_aborts=aborts,
        delta=interval / n_steps,
    )


def sample_bridge_approx(model, a, b, interval, n_steps, scheme, rng,
                         max_attempts=MAX_ATTEMPTS_DEFAULT):
    """Rejection-sample one approximate bridge from a to b over [0, interval]."""
    batch = sample_bridges(
        model, a, b, interval, n_steps, scheme, 1, rng, max_attempts=max_attempts
    )
    return BridgeSample(
        path=batch.path(0),
        crossing_index=int(batch.crossing_index[0]),
        attempts=int(batch.attempts[0]),
        boundary_aborts=int(batch.boundary_aborts[0]),
    )


def sample_bridges_per_row(model, a_vec, b_vec, interval, n_steps, scheme, rng,
                           max_attempts=MAX_ATTEMPTS_DEFAULT, row_block=8192):
    """One accepted bridge per row of endpoint vectors (a_vec, b_vec).

    Used by samplers that need many bridges with heterogeneous
    endpoints (e.g. one per data interval).  Returns a BridgeBatch
    aligned with the input rows.
    """
    a_vec = np.asarray(a_vec, dtype=float)
    b_vec = np.asarray(b_vec, dtype=float)
    if a_vec.shape != b_vec.shape or a_vec.ndim != 1:
        raise UsageError("a_vec and b_vec must be 1-d arrays of equal length")
    rng = as_generator(rng)
    n_rows = a_vec.size
    n_pts = n_steps + 1
    values = np.empty((n_rows, n_pts))
    crossing = np.empty(n_rows, dtype=np.int64)
    attempts = np.zeros(n_rows, dtype=np.int64)
    aborts = np.zeros(n_rows, dtype=np.int64)

    for start in range(0, n_rows, row_block):
        sl = slice(start, min(start + row_block, n_rows))
        pending = np.arange(sl.start, sl.stop)
        while pending.size:
            y1, y2, dead, has, nu = _pair_crossings(
                model, a_vec[pending], b_vec[pending], interval, n_steps, scheme, rng
            )
            attempts[pending] += 1
            aborts[pending] += dead
            done = np.flatnonzero(has)
            rows = pending[done]
            spliced = _splice_rows(y1[done], y2[done], nu[done])
            values[rows] = spliced
            crossing[rows] = nu[done]
            pending = pending[~has]
            if pending.size and attempts[pending].min() >= max_attempts:
                worst = int(pending[np.argmax(attempts[pending])])
                raise RejectionBudgetError(
                    f"row {worst}: no crossing in {attempts[worst]} attempts "
                    f"({aborts[worst]} boundary aborts)",
                    attempts=int(attempts[worst]),
                    boundary_aborts=int(aborts[worst]),
                )
    return BridgeBatch(
        values=values,
        crossing_index=crossing,
        attempts=attempts,
        boundary_aborts=aborts,
        delta=interval / n_steps,
    )


def estimate_rejection_prob(model, a, b, interval, n_steps, scheme, n_samples, rng,
                            chunk=8192):
    """Single-attempt Monte Carlo estimate of the no-crossing probability.

    Boundary-aborted pairs count as rejections.  Returns the estimate
    and its binomial standard error.
    """
    if n_samples < 1:
        raise UsageError("n_samples must be >= 1")
    rng = as_generator(rng)
    scheme = Scheme.parse(scheme)
    rejected = 0
    left = n_samples
    while left > 0:
        size = min(chunk, left)
        a_vec = np.full(size, float(a))
        b_vec = np.full(size, float(b))
        _, _, _, has, _ = _pair_crossings(
            model, a_vec, b_vec, interval, n_steps, scheme, rng
        )
        rejected += size - int(has.sum())
        left -= size
    p = rejected / n_samples
    se = float(np.sqrt(p * (1.0 - p) / n_samples))
    return p, se
