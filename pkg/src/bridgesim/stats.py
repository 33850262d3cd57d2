"""Distribution comparison and benchmark machinery.

Two-sample Kolmogorov-Smirnov with the asymptotic p-value, paired
empirical quantiles for Q-Q plots, sample autocorrelations, the miss
probability of exact bridges against independent diffusions, and a
benchmark runner that emits CSV rows (CPU seconds, rejection counts)
for lists of endpoint or interval-length jobs.
"""

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from ._streams import as_generator, substream
from .bridge_approx import sample_bridges
from .bridge_exact import _rows_hit, exact_bridge_mh
from .errors import UsageError
from .ou_oracle import OuParams, ou_bridge_paths
from .schemes import Scheme, simulate_pdelta_batch

__all__ = [
    "SampleSet",
    "ks_two_sample",
    "qq_data",
    "acf",
    "estimate_miss_prob",
    "benchmark_endpoint_jobs",
    "benchmark_delta_sweep",
    "benchmark_table",
    "write_table_csv",
]


@dataclass(frozen=True)
class SampleSet:
    """A labelled sample of scalars with free-form provenance metadata."""

    values: np.ndarray
    label: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float).ravel()
        if vals.size == 0:
            raise UsageError("sample set must be nonempty")
        object.__setattr__(self, "values", vals)


def _values(x):
    return x.values if isinstance(x, SampleSet) else np.asarray(x, dtype=float).ravel()


def _kolmogorov_sf(t, terms=101):
    """Asymptotic survival function 2 sum_k (-1)^(k-1) exp(-2 k^2 t^2)."""
    if t <= 0:
        return 1.0
    k = np.arange(1, terms)
    total = 2.0 * np.sum((-1.0) ** (k - 1) * np.exp(-2.0 * (k * t) ** 2))
    return float(min(1.0, max(0.0, total)))


def ks_two_sample(x, y):
    """Two-sample KS statistic (sup CDF distance) and asymptotic p-value."""
    xv = np.sort(_values(x))
    yv = np.sort(_values(y))
    both = np.concatenate([xv, yv])
    cdf_x = np.searchsorted(xv, both, side="right") / xv.size
    cdf_y = np.searchsorted(yv, both, side="right") / yv.size
    stat = float(np.max(np.abs(cdf_x - cdf_y)))
    n_eff = xv.size * yv.size / (xv.size + yv.size)
    return stat, _kolmogorov_sf(np.sqrt(n_eff) * stat)


def qq_data(x, y, n_quantiles):
    """Paired empirical quantiles at levels (i - 0.5)/n, plot-ready."""
    if n_quantiles < 1:
        raise UsageError("n_quantiles must be >= 1")
    levels = (np.arange(1, n_quantiles + 1) - 0.5) / n_quantiles
    qx = np.quantile(_values(x), levels)
    qy = np.quantile(_values(y), levels)
    return np.column_stack([qx, qy])


def acf(series, max_lag):
    """Sample autocorrelations with biased normalization, lags 0..max_lag."""
    series = np.asarray(series, dtype=float).ravel()
    if series.size <= max_lag:
        raise UsageError(f"series of length {series.size} too short for lag {max_lag}")
    d = series - series.mean()
    denom = float(np.dot(d, d))
    out = np.empty(max_lag + 1)
    out[0] = 1.0
    for k in range(1, max_lag + 1):
        out[k] = float(np.dot(d[:-k], d[k:])) / denom
    return out


def estimate_miss_prob(model, a, b, interval, n_steps, n_bridges, rng,
                       scheme=Scheme.EULER, mh_burn_in=1000, mh_thin=10):
    """Probability that an exact bridge is missed by an independent
    diffusion started from the end-point transition density.

    Exact bridges come from the closed-form sampler when the model is
    the built-in mean-reverting Gaussian one, else from the exact
    pseudo-marginal chain (thinned).  Each bridge is paired with one
    independent diffusion and the miss frequency is returned.
    """
    rng = as_generator(rng)
    if model.name == "ou":
        p = OuParams(**model.params)
        bridges = ou_bridge_paths(p, a, b, interval, n_steps, rng, n_bridges)
    else:
        result = exact_bridge_mh(
            model, a, b, interval, n_steps, scheme, 1,
            mh_burn_in + n_bridges * mh_thin, mh_burn_in, rng,
        )
        bridges = np.stack(
            [s.bridge.values for s in result.states[::mh_thin]][:n_bridges]
        )
    misses = 0
    chunk = 8192
    for start in range(0, n_bridges, chunk):
        rows = bridges[start : start + chunk]
        y, fail = simulate_pdelta_batch(
            model, np.full(rows.shape[0], float(b)), interval, n_steps,
            Scheme.parse(scheme), rng,
        )
        hit = _rows_hit(rows, y, dead=fail >= 0)
        misses += rows.shape[0] - int(hit.sum())
    return misses / n_bridges


# ---------------------------------------------------------------------------
# Benchmark tables
# ---------------------------------------------------------------------------

def benchmark_endpoint_jobs(model, jobs, interval, n_steps, n_samples, seed,
                            scheme=Scheme.EULER, with_miss_prob=False):
    """One row per (a, b): CPU seconds to draw ``n_samples`` accepted
    bridges, the observed rejection probability, and optionally the
    exact-bridge miss probability."""
    rows = []
    for idx, (a, b) in enumerate(jobs):
        row = {"a": a, "b": b}
        try:
            rng = substream(seed, 91, idx)
            t0 = time.perf_counter()
            batch = sample_bridges(
                model, a, b, interval, n_steps, scheme, n_samples, rng
            )
            row["cpu_seconds"] = time.perf_counter() - t0
            pairs = int(batch.attempts.sum())
            row["n_pairs"] = pairs
            row["rejection_prob"] = (pairs - n_samples) / pairs
            row["boundary_aborts"] = int(batch.boundary_aborts.sum())
            if with_miss_prob:
                row["one_minus_pi"] = estimate_miss_prob(
                    model, a, b, interval, n_steps, n_samples,
                    substream(seed, 92, idx), scheme=scheme,
                )
        except Exception as exc:  # keep the table going, record the failure
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows


def benchmark_delta_sweep(model, deltas, a, b, n_steps_per_unit, n_samples, seed,
                          scheme=Scheme.EULER):
    """One row per interval length: CPU seconds and rejection count for
    ``n_samples`` accepted bridges at grid resolution n_steps_per_unit."""
    rows = []
    for idx, delta in enumerate(deltas):
        n_steps = max(2, int(round(n_steps_per_unit * delta)))
        row = {"delta": delta, "n_steps": n_steps}
        try:
            rng = substream(seed, 93, idx)
            t0 = time.perf_counter()
            batch = sample_bridges(model, a, b, delta, n_steps, scheme, n_samples, rng)
            row["cpu_seconds"] = time.perf_counter() - t0
            row["n_rejections"] = int(batch.attempts.sum()) - n_samples
        except Exception as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows


def benchmark_table(model, job_spec, seed):
    """Dispatch a parsed benchmark job spec to the matching runner.

    ``job_spec`` carries either "jobs": [[a, b], ...] or
    "deltas": [...] with fixed "a"/"b", plus the shared numeric knobs.
    """
    n_samples = int(job_spec.get("samples", 10000))
    scheme = Scheme.parse(job_spec.get("scheme", "euler"))
    if "jobs" in job_spec:
        return benchmark_endpoint_jobs(
            model,
            [tuple(j) for j in job_spec["jobs"]],
            float(job_spec["delta"]),
            int(job_spec["steps"]),
            n_samples,
            seed,
            scheme=scheme,
            with_miss_prob=bool(job_spec.get("with_miss_prob", False)),
        )
    if "deltas" in job_spec:
        return benchmark_delta_sweep(
            model,
            [float(d) for d in job_spec["deltas"]],
            float(job_spec.get("a", 0.0)),
            float(job_spec.get("b", 0.0)),
            int(job_spec.get("steps_per_unit", 100)),
            n_samples,
            seed,
            scheme=scheme,
        )
    if not job_spec.get("jobs") and not job_spec.get("deltas"):
        return []
    raise UsageError("benchmark spec needs either 'jobs' or 'deltas'")


def write_table_csv(rows, stream):
    """Serialize benchmark rows as CSV with the union of row keys."""
    if not rows:
        stream.write("")
        return
    fields = []
    for row in rows:
        for key in row:
            if key not in fields:
                fields.append(key)
    writer = csv.DictWriter(stream, fieldnames=fields)
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
