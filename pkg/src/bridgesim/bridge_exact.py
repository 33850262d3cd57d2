"""Exact bridge sampling by pseudo-marginal Metropolis-Hastings.

The approximate crossing sampler proposes independent bridges whose law
differs from the exact bridge law by the factor pi(x)/pi_bar, where
pi(x) is the probability that an independent diffusion started from the
end-point transition density intersects the trajectory x.  The number
of such diffusions simulated until one intersects x is geometric with
mean 1/pi(x), so averaging a few of those counts gives an unbiased
estimate of the intractable acceptance-ratio factor.  Carrying the
counts along in the chain makes the bridge marginal exact.

Because proposals are independent of the chain state, the expensive
work (proposal bridges and their hitting counts) is generated in
vectorized pools up front; the accept/reject scan itself is sequential
and cheap.
"""

from dataclasses import dataclass

import numpy as np

from ._streams import as_generator
from .bridge_approx import sample_bridges
from .errors import HittingBudgetError, UsageError
from .schemes import (
    GridPath,
    Scheme,
    require_same_grid,
    simulate_pdelta_batch,
)

__all__ = [
    "PmState",
    "MhResult",
    "hits",
    "sample_hit_count",
    "hit_count_samples",
    "mean_hit_count",
    "exact_bridge_mh",
    "estimate_hit_prob",
]

HIT_CAP_DEFAULT = 10**6


@dataclass(frozen=True)
class PmState:
    """One pseudo-marginal chain state: a bridge plus its count vector.

    ``mean_count`` is exactly the arithmetic mean of ``hit_counts`` and
    estimates 1/pi(bridge); it is always >= 1 because every count is.
    """

    bridge: GridPath
    hit_counts: np.ndarray
    mean_count: float


@dataclass(frozen=True)
class MhResult:
    """Post-burn-in states plus mixing diagnostics of one chain."""

    states: list
    acceptance_rate: float
    rho_trace: np.ndarray
    accept_flags: np.ndarray
    capped_proposals: int
    proposal_attempts: int
    boundary_aborts: int


def _rows_hit(x_rows, y_rows, dead=None):
    """Row-wise grid intersection: shared point or sign change of the gap."""
    d = x_rows - y_rows
    hit = (d == 0.0).any(axis=1) | ((d[:, :-1] * d[:, 1:]) < 0.0).any(axis=1)
    if dead is not None:
        hit &= ~dead
    return hit


def hits(x, y):
    """True when the graphs of two equal-grid paths intersect."""
    require_same_grid(x, y)
    return bool(_rows_hit(x.values[None, :], y.values[None, :])[0])


def mean_hit_count(counts):
    """Arithmetic mean of a nonempty vector of hitting counts."""
    counts = np.asarray(counts)
    if counts.size == 0:
        raise UsageError("need at least one hitting count")
    return float(counts.mean())


def hit_count_samples(model, x_values, b, interval, n_steps, scheme, rng, n_counts,
                      cap=HIT_CAP_DEFAULT, chunk_max=65536):
    """Draw ``n_counts`` independent hitting counts against a fixed path.

    Simulates a stream of independent end-point diffusions in chunks
    and reads off the gaps between successive intersections, which have
    exactly the law of independent counts.  Raises HittingBudgetError
    when a single count would exceed ``cap``.
    """
    x_values = np.asarray(x_values, dtype=float)
    rng = as_generator(rng)
    scheme = Scheme.parse(scheme)
    counts = np.empty(n_counts, dtype=np.int64)
    got = 0
    gap = 0
    draws_seen = 1.0
    hits_seen = 1.0
    while got < n_counts:
        rate = max(hits_seen / draws_seen, 1.0 / 1024.0)
        want = int(np.ceil((n_counts - got) / rate * 1.2))
        size = int(np.clip(want, 32, chunk_max))
        y, fail = simulate_pdelta_batch(
            model, np.full(size, float(b)), interval, n_steps, scheme, rng
        )
        hit = _rows_hit(np.broadcast_to(x_values, y.shape), y, dead=fail >= 0)
        draws_seen += size
        hits_seen += int(hit.sum())
        pos = np.flatnonzero(hit)
        take = min(pos.size, n_counts - got)
        if take:
            gaps = np.diff(pos[:take], prepend=-1)
            gaps[0] += gap  # carry over the open run from earlier chunks
            counts[got : got + take] = gaps
            gap = 0
            got += take
        if got < n_counts:
            last = pos[take - 1] if take else -1
            gap += size - (last + 1)
            if gap >= cap:
                raise HittingBudgetError(
                    f"no intersection in {gap} trials (hit probability ~ 0)",
                    trials=gap,
                )
    return counts


def sample_hit_count(model, x, b, interval, n_steps, scheme, rng, cap=HIT_CAP_DEFAULT):
    """The geometric trial count: independent end-point diffusions are
    simulated until one intersects ``x``; returns that trial's number."""
    if x.n_steps != n_steps:
        raise UsageError(f"bridge has {x.n_steps} steps, expected {n_steps}")
    return int(
        hit_count_samples(
            model, x.values, b, interval, n_steps, scheme, rng, 1, cap=cap,
            chunk_max=1024,
        )[0]
    )


def estimate_hit_prob(model, x, b, interval, n_steps, scheme, n_draws, rng,
                      chunk=8192):
    """Monte Carlo estimate of pi(x): the fraction of independent
    end-point diffusions whose graph intersects ``x``."""
    if n_draws < 1:
        raise UsageError("n_draws must be >= 1")
    rng = as_generator(rng)
    scheme = Scheme.parse(scheme)
    x_values = np.asarray(x.values if isinstance(x, GridPath) else x, dtype=float)
    hit_total = 0
    left = n_draws
    while left > 0:
        size = min(chunk, left)
        y, fail = simulate_pdelta_batch(
            model, np.full(size, float(b)), interval, n_steps, scheme, rng
        )
        hit_total += int(_rows_hit(np.broadcast_to(x_values, y.shape), y,
                                   dead=fail >= 0).sum())
        left -= size
    return hit_total / n_draws


def bulk_hit_counts(model, bridge_values, b_vec, interval, n_steps, scheme, rng,
                    n_draws, cap=HIT_CAP_DEFAULT):
    """Hitting-count vectors for many bridges at once.

    Row r receives ``n_draws`` counts against ``bridge_values[r]`` using
    end-point diffusions from ``b_vec[r]``.  Rows whose running count
    exceeds ``cap`` are flagged capped and abandoned (their remaining
    counts are unusable).  Returns ``(counts, capped)``.
    """
    bridge_values = np.asarray(bridge_values, dtype=float)
    b_vec = np.asarray(b_vec, dtype=float)
    n_rows = bridge_values.shape[0]
    counts = np.zeros((n_rows, n_draws), dtype=np.int64)
    filled = np.zeros(n_rows, dtype=np.int64)
    gap = np.zeros(n_rows, dtype=np.int64)
    capped = np.zeros(n_rows, dtype=bool)
    pending = np.arange(n_rows)
    while pending.size:
        y, fail = simulate_pdelta_batch(
            model, b_vec[pending], interval, n_steps, scheme, rng
        )
        gap[pending] += 1
        hit = _rows_hit(bridge_values[pending], y, dead=fail >= 0)
        rows = pending[hit]
        counts[rows, filled[rows]] = gap[rows]
        gap[rows] = 0
        filled[rows] += 1
        over = gap[pending] >= cap
        capped[pending[over]] = True
        keep = ~(over | (filled[pending] >= n_draws))
        pending = pending[keep]
    return counts, capped


def exact_bridge_mh(model, a, b, interval, n_steps, scheme, n_hit_draws, n_iter,
                    burn_in, rng, cap=HIT_CAP_DEFAULT, max_attempts=10**6):
    """Run the pseudo-marginal chain and return post-burn-in states.

    Each iteration proposes an independent approximate bridge with a
    fresh vector of ``n_hit_draws`` hitting counts and accepts with
    probability min(1, mean_count_proposal / mean_count_current); on
    rejection the full previous state (bridge and counts) is retained
    unchanged.  Proposals whose count draw hits ``cap`` are discarded
    and replaced without advancing the chain.
    """
    if not (isinstance(n_iter, int) and isinstance(burn_in, int) and n_iter > burn_in >= 0):
        raise UsageError(f"need n_iter > burn_in >= 0, got {n_iter}, {burn_in}")
    if n_hit_draws < 1:
        raise UsageError("n_hit_draws must be >= 1")
    rng = as_generator(rng)
    scheme = Scheme.parse(scheme)
    delta_step = interval / n_steps

    pool_vals = None
    pool_rho = None
    pool_counts = None
    pool_capped = None
    pool_pos = 0
    capped_total = 0
    attempts_total = 0
    aborts_total = 0

    def refill(n_needed):
        nonlocal pool_vals, pool_rho, pool_counts, pool_capped, pool_pos
        nonlocal attempts_total, aborts_total
        batch = sample_bridges(
            model, a, b, interval, n_steps, scheme, n_needed, rng,
            max_attempts=max_attempts,
        )
        attempts_total += int(batch.attempts.sum())
        aborts_total += int(batch.boundary_aborts.sum())
        counts, capped = bulk_hit_counts(
            model, batch.values, np.full(n_needed, float(b)), interval, n_steps,
            scheme, rng, n_hit_draws, cap=cap,
        )
        pool_vals = batch.values
        pool_counts = counts
        pool_rho = counts.mean(axis=1)
        pool_capped = capped
        pool_pos = 0

    def next_proposal():
        nonlocal pool_pos, capped_total
        while True:
            if pool_vals is None or pool_pos >= pool_vals.shape[0]:
                refill(max(256, n_iter + 1 - it_done))
            idx = pool_pos
            pool_pos += 1
            if pool_capped[idx]:
                capped_total += 1
                continue
            bridge = GridPath(t0=0.0, delta=delta_step, values=pool_vals[idx])
            return PmState(
                bridge=bridge,
                hit_counts=pool_counts[idx],
                mean_count=float(pool_rho[idx]),
            )

    it_done = 0
    refill(n_iter + 1)
    current = next_proposal()
    states = []
    rho_trace = np.empty(n_iter)
    accept_flags = np.zeros(n_iter, dtype=bool)
    n_accept = 0
    for it in range(n_iter):
        it_done = it
        proposal = next_proposal()
        if rng.random() * current.mean_count < proposal.mean_count:
            current = proposal
            accept_flags[it] = True
            n_accept += 1
        rho_trace[it] = current.mean_count
        if it >= burn_in:
            states.append(current)
    return MhResult(
        states=states,
        acceptance_rate=n_accept / n_iter,
        rho_trace=rho_trace,
        accept_flags=accept_flags,
        capped_proposals=capped_total,
        proposal_attempts=attempts_total,
        boundary_aborts=aborts_total,
    )
