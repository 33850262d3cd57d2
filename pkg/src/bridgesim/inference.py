"""Simulation-based likelihood inference for discretely observed diffusions.

The observed data are snapshots of a parametric diffusion
``dX = b(alpha, X) dt + sigma(beta, X) dW``; the paths between
observations are missing.  After the unit-diffusion transform
``h(beta, .)`` (integral of 1/sigma), the complete-data log-likelihood
is explicit, and its conditional expectation given the data is a Monte
Carlo average over simulated bridges of the transformed process.
Iterating expectation and maximization yields the maximum likelihood
estimator; when the drift is linear in ``alpha`` the maximization step
has a closed form and a conjugate normal posterior exists.

Because the transform depends on ``beta``, bridges simulated at the
current parameter guess are re-pinned to candidate-``beta`` endpoints
by an affine-in-time shift before evaluating the objective.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad
from scipy.optimize import minimize

from ._streams import as_generator, substream
from .bridge_approx import sample_bridges_per_row
from .bridge_exact import bulk_hit_counts
from .errors import NumericError, UsageError
from .models import DiffusionModel
from .schemes import GridPath, Scheme

__all__ = [
    "ParamVector",
    "DiscreteSample",
    "LinearDriftSpec",
    "DriftDiffusionFamily",
    "ou_family",
    "const_sigma_linear_family",
    "EstepMhConfig",
    "EmStep",
    "EmTrace",
    "aux_terms",
    "ystar",
    "shifted_bridge_values",
    "expected_loglik",
    "simulate_estep_bridges",
    "em_fit",
    "expfam_stats",
    "expfam_drift_mle",
    "expfam_profile",
    "conjugate_posterior",
]


@dataclass(frozen=True)
class ParamVector:
    """Drift parameters ``alpha`` and diffusion parameters ``beta``."""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.atleast_1d(np.asarray(self.alpha, dtype=float)))
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))

    def as_array(self):
        return np.concatenate([self.alpha, self.beta])


@dataclass(frozen=True)
class DiscreteSample:
    """Observations x_i at strictly increasing times t_i."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        x = np.asarray(self.values, dtype=float)
        if t.ndim != 1 or t.shape != x.shape or t.size < 2:
            raise UsageError("need equally long 1-d times/values with >= 2 points")
        if np.any(np.diff(t) <= 0):
            raise UsageError("observation times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", x)

    @property
    def n_intervals(self):
        return self.times.size - 1


@dataclass(frozen=True)
class LinearDriftSpec:
    """Drift basis b(alpha, x) = sum_i alpha_i * basis[i](x), with derivatives."""

    basis: tuple
    basis_dx: tuple

    def __post_init__(self):
        if len(self.basis) != len(self.basis_dx) or not self.basis:
            raise UsageError("basis and basis_dx must be nonempty and equally long")
        object.__setattr__(self, "basis", tuple(self.basis))
        object.__setattr__(self, "basis_dx", tuple(self.basis_dx))

    @property
    def k(self):
        return len(self.basis)

    def check_independent(self, x_samples, cond_limit=1e10):
        """Gram-matrix conditioning check of linear independence on data range."""
        a = np.stack([np.asarray(f(x_samples), dtype=float) for f in self.basis])
        gram = a @ a.T / a.shape[1]
        if np.linalg.cond(gram) > cond_limit:
            raise NumericError("drift basis is numerically dependent on the data range")


def _fd_derivative(f):
    def deriv(*args):
        x = np.asarray(args[-1], dtype=float)
        h = 1e-5 * np.maximum(1.0, np.abs(x))
        hi = f(*args[:-1], x + h)
        lo = f(*args[:-1], x - h)
        return (np.asarray(hi, dtype=float) - np.asarray(lo, dtype=float)) / (2.0 * h)

    return deriv


@dataclass(frozen=True, eq=False)
class DriftDiffusionFamily:
    """A parametric scalar diffusion family.

    Coefficient callables take (params, x) with x an array.  ``transform``
    and ``transform_inv`` are the unit-diffusion change of variables and
    its inverse; supply closed forms whenever possible, since the
    inverse is evaluated on every bridge grid point.  ``linear_drift``
    enables the closed-form maximization and conjugate posterior.
    """

    drift: callable
    diffusion: callable
    drift_dx: callable = None
    diffusion_dx: callable = None
    diffusion_dxx: callable = None
    transform: callable = None
    transform_inv: callable = None
    x_star: float = 0.0
    alpha_dim: int = 1
    beta_dim: int = 1
    beta_min: float = 1e-8
    linear_drift: LinearDriftSpec = None
    name: str = "family"

    def sigma(self, beta, x):
        return np.asarray(self.diffusion(beta, x), dtype=float)

    def sigma_dx(self, beta, x):
        f = self.diffusion_dx or _fd_derivative(self.diffusion)
        return np.asarray(f(beta, x), dtype=float)

    def sigma_dxx(self, beta, x):
        # central differences of sigma' at scale-aware step when no
        # second derivative is supplied
        f = self.diffusion_dxx
        if f is None:
            f = _fd_derivative(self.diffusion_dx or _fd_derivative(self.diffusion))
        return np.asarray(f(beta, x), dtype=float)

    def b(self, alpha, x):
        return np.asarray(self.drift(alpha, x), dtype=float)

    def b_dx(self, alpha, x):
        f = self.drift_dx or _fd_derivative(self.drift)
        return np.asarray(f(alpha, x), dtype=float)

    def h(self, beta, x):
        if self.transform is not None:
            return np.asarray(self.transform(beta, x), dtype=float)
        scalar = np.isscalar(x) or np.ndim(x) == 0
        xs = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.array(
            [quad(lambda y: 1.0 / float(self.diffusion(beta, y)),
                  self.x_star, xi, epsabs=1e-12)[0] for xi in xs]
        )
        return float(out[0]) if scalar else out

    def h_inv(self, beta, y):
        if self.transform_inv is not None:
            return np.asarray(self.transform_inv(beta, y), dtype=float)
        raise UsageError(
            f"family {self.name!r} has no closed-form inverse transform; "
            "supply transform_inv to evaluate bridge functionals"
        )

    def bounds(self):
        return [(None, None)] * self.alpha_dim + [(self.beta_min, None)] * self.beta_dim


def const_sigma_linear_family(spec, x_star=0.0, name="linear-const-sigma"):
    """Family with linear drift and constant diffusion sigma(beta, x) = beta."""

    def drift(alpha, x):
        alpha = np.atleast_1d(alpha)
        return sum(alpha[i] * np.asarray(spec.basis[i](x), dtype=float)
                   for i in range(spec.k))

    def drift_dx(alpha, x):
        alpha = np.atleast_1d(alpha)
        return sum(alpha[i] * np.asarray(spec.basis_dx[i](x), dtype=float)
                   for i in range(spec.k))

    beta0 = lambda beta: float(np.atleast_1d(beta)[0])
    return DriftDiffusionFamily(
        drift=drift,
        drift_dx=drift_dx,
        diffusion=lambda beta, x: np.full_like(np.asarray(x, dtype=float), beta0(beta)),
        diffusion_dx=lambda beta, x: np.zeros_like(np.asarray(x, dtype=float)),
        diffusion_dxx=lambda beta, x: np.zeros_like(np.asarray(x, dtype=float)),
        transform=lambda beta, x: (np.asarray(x, dtype=float) - x_star) / beta0(beta),
        transform_inv=lambda beta, y: x_star + beta0(beta) * np.asarray(y, dtype=float),
        x_star=x_star,
        alpha_dim=spec.k,
        beta_dim=1,
        linear_drift=spec,
        name=name,
    )


def ou_family(x_star=0.0):
    """Mean-reversion family dX = -alpha_1 X dt + beta dW (alpha_1 = rate)."""
    spec = LinearDriftSpec(
        basis=(lambda x: -np.asarray(x, dtype=float),),
        basis_dx=(lambda x: -np.ones_like(np.asarray(x, dtype=float)),),
    )
    return const_sigma_linear_family(spec, x_star=x_star, name="ou")


FAMILIES = {"ou": ou_family}


# ---------------------------------------------------------------------------
# Auxiliary functions of the transformed likelihood
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AuxTerms:
    """h, g, s at one point: unit-diffusion transform h, drift potential
    s = int_{x*}^x b/sigma^2, and boundary term g = s - log(sigma)/2."""

    h: float
    g: float
    s: float


def _s_components(family, beta, x):
    """Per-basis potentials int_{x*}^x a_i/sigma^2 (linear drift only)."""
    spec = family.linear_drift
    return np.array(
        [
            quad(
                lambda y, f=f: float(f(y)) / float(family.diffusion(beta, y)) ** 2,
                family.x_star,
                float(x),
                epsabs=1e-12,
            )[0]
            for f in spec.basis
        ]
    )


def _s_value(family, alpha, beta, x):
    if family.linear_drift is not None:
        # decomposition shared with expfam_stats so both code paths see
        # bitwise-identical quadrature values
        return float(np.dot(np.atleast_1d(alpha), _s_components(family, beta, x)))
    val, _ = quad(
        lambda y: float(family.drift(alpha, y)) / float(family.diffusion(beta, y)) ** 2,
        family.x_star,
        float(x),
        epsabs=1e-12,
    )
    return val


def aux_terms(family, alpha, beta, x):
    """Evaluate (h, g, s) of the transformed likelihood at x."""
    s = _s_value(family, alpha, beta, x)
    sig = float(family.sigma(beta, np.asarray(x, dtype=float)))
    if not sig > 0:
        raise NumericError(f"sigma({x}) = {sig} not positive")
    return AuxTerms(h=float(family.h(beta, x)), g=s - 0.5 * math.log(sig), s=s)


# ---------------------------------------------------------------------------
# Bridges between transformed observations and the Y* endpoint shift
# ---------------------------------------------------------------------------

def _endpoint_shifts(family, beta, beta0, data, j):
    if not 1 <= j <= data.n_intervals:
        raise UsageError(f"interval index {j} outside 1..{data.n_intervals}")
    x_lo, x_hi = data.values[j - 1], data.values[j]
    dh_lo = float(family.h(beta, x_lo)) - float(family.h(beta0, x_lo))
    dh_hi = float(family.h(beta, x_hi)) - float(family.h(beta0, x_hi))
    return dh_lo, dh_hi


def ystar(family, beta, beta0, bridge, data, j, t):
    """Bridge value re-pinned to the beta-transform endpoints at time t.

    ``bridge`` is a unit-diffusion bridge for data interval j simulated
    at base parameters; the shift interpolates the endpoint transform
    differences linearly in time.
    """
    t_lo, t_hi = data.times[j - 1], data.times[j]
    if not t_lo <= t <= t_hi:
        raise UsageError(f"t={t} outside interval [{t_lo}, {t_hi}]")
    dh_lo, dh_hi = _endpoint_shifts(family, beta, beta0, data, j)
    k = (t - bridge.t0) / bridge.delta
    idx = int(round(k))
    if not (0 <= idx <= bridge.n_steps and abs(k - idx) < 1e-9):
        raise UsageError(f"t={t} is not a grid time of the bridge")
    shift = (dh_lo * (t_hi - t) + dh_hi * (t - t_lo)) / (t_hi - t_lo)
    return float(bridge.values[idx]) + shift


def shifted_bridge_values(family, beta, beta0, bridge, data, j):
    """Vector version of :func:`ystar` over the whole bridge grid."""
    dh_lo, dh_hi = _endpoint_shifts(family, beta, beta0, data, j)
    if dh_lo == 0.0 and dh_hi == 0.0:
        return bridge.values
    n = bridge.n_steps
    w1 = np.arange(n + 1) / n
    return bridge.values + dh_lo * (1.0 - w1) + dh_hi * w1


class _BridgeStack:
    """Per-interval bridge draws flattened into grouped row arrays.

    Groups collect intervals with equal step counts so that the heavy
    integrand evaluation runs on one large array per group.  Rows keep
    their interval index for per-interval averaging.
    """

    def __init__(self, bridges, data):
        n_int = data.n_intervals
        if len(bridges) != n_int:
            raise UsageError(
                f"need one bridge entry per interval ({n_int}), got {len(bridges)}"
            )
        per_interval = []
        for j, entry in enumerate(bridges, start=1):
            draws = [entry] if isinstance(entry, GridPath) else list(entry)
            if not draws:
                raise UsageError(f"interval {j} has no bridge draws")
            n_steps = draws[0].n_steps
            for d in draws:
                if d.n_steps != n_steps:
                    raise UsageError(f"interval {j} draws disagree on grid size")
            per_interval.append((n_steps, np.stack([d.values for d in draws])))

        self.data = data
        self.groups = []
        by_steps = {}
        for j, (n_steps, rows) in enumerate(per_interval):
            by_steps.setdefault(n_steps, []).append(j)
        for n_steps, interval_ids in by_steps.items():
            rows = np.concatenate([per_interval[j][1] for j in interval_ids])
            iv = np.concatenate(
                [np.full(per_interval[j][1].shape[0], j) for j in interval_ids]
            )
            dt_full = data.times[1:] - data.times[:-1]
            dt_step = dt_full[iv] / n_steps
            w1 = np.arange(n_steps + 1) / n_steps
            self.groups.append(
                {
                    "rows": rows,
                    "iv": iv,
                    "dt_step": dt_step,
                    "w1": w1,
                }
            )
        self.n_intervals = n_int
        self.n_draws_total = sum(g["rows"].shape[0] for g in self.groups)

    def interval_means(self, family, beta, beta0, integrand):
        """Mean over draws, per interval, of the trapezoid time integral of
        ``integrand(x_tilde, sigma, sigma_dx)`` evaluated on the shifted rows.

        ``integrand`` receives the back-transformed values and returns a
        tuple of arrays shaped like the rows; the result is a tuple of
        per-interval-summed means, one entry per integrand output.
        """
        data = self.data
        dh = np.empty((self.n_intervals, 2))
        for j in range(1, self.n_intervals + 1):
            dh[j - 1] = _endpoint_shifts(family, beta, beta0, data, j)
        totals = None
        counts = np.zeros(self.n_intervals)
        for g in self.groups:
            rows, iv, w1 = g["rows"], g["iv"], g["w1"]
            shift = np.outer(dh[iv, 0], 1.0 - w1) + np.outer(dh[iv, 1], w1)
            y = rows + shift
            x_tilde = family.h_inv(beta, y)
            outs = integrand(x_tilde)
            if totals is None:
                totals = [np.zeros(self.n_intervals) for _ in outs]
            for slot, w in zip(totals, outs):
                integral = g["dt_step"] * (w.sum(axis=1) - 0.5 * (w[:, 0] + w[:, -1]))
                slot += np.bincount(iv, weights=integral, minlength=self.n_intervals)
            counts += np.bincount(iv, minlength=self.n_intervals)
        return [slot / counts for slot in totals]


def _prepare(bridges, data):
    return bridges if isinstance(bridges, _BridgeStack) else _BridgeStack(bridges, data)


def _data_terms(family, alpha, beta, data):
    """All bridge-free terms of the objective: boundary g difference, the
    squared transform increments, and the sigma log-sum."""
    x = data.values
    h_vals = np.asarray(family.h(beta, x), dtype=float)
    incr = -0.5 * float(
        np.sum((h_vals[1:] - h_vals[:-1]) ** 2 / (data.times[1:] - data.times[:-1]))
    )
    sig = family.sigma(beta, x)
    if np.any(sig <= 0):
        raise NumericError("sigma not positive on the data range")
    log_sig = -float(np.sum(np.log(sig[1:])))
    g_hi = aux_terms(family, alpha, beta, x[-1]).g
    g_lo = aux_terms(family, alpha, beta, x[0]).g
    return g_hi - g_lo, incr, log_sig


def expected_loglik(family, alpha, beta, bridges, data, alpha0, beta0):
    """Monte Carlo E-step objective q(alpha, beta).

    ``bridges`` holds, per data interval, one draw or a sequence of
    draws of the unit-diffusion bridge simulated at (alpha0, beta0);
    expectation is the average over the supplied draws, and the time
    integrals use the trapezoid rule on each bridge grid.
    """
    stack = _prepare(bridges, data)
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    g_diff, incr, log_sig = _data_terms(family, alpha, beta, data)

    def integrand(x_tilde):
        b = family.b(alpha, x_tilde)
        sig = family.sigma(beta, x_tilde)
        sp = family.sigma_dx(beta, x_tilde)
        mu = b / sig - 0.5 * sp
        mu_dy = family.b_dx(alpha, x_tilde) - b * sp / sig - 0.5 * family.sigma_dxx(
            beta, x_tilde
        ) * sig
        return (mu_dy + mu * mu,)

    (means,) = stack.interval_means(family, beta, beta0, integrand)
    return g_diff + incr + log_sig - 0.5 * float(np.sum(means))


# ---------------------------------------------------------------------------
# E-step bridge simulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EstepMhConfig:
    """Settings of the per-interval exact bridge chains in the E-step.

    The independence-proposal chain mixes in a handful of iterations,
    so a short burn-in suffices; consecutive post-burn-in states are
    kept as the expectation sample.
    """

    sampler: str = "exact"  # or "approx"
    n_hit_draws: int = 1
    burn_in: int = 50
    cap: int = 10**6
    max_attempts: int = 10**6
    steps_per_unit: int = 100
    scheme: Scheme = Scheme.MILSTEIN
    max_rows_per_block: int = 40000


def _transformed_model(family, alpha0, beta0):
    def mu(y):
        x = family.h_inv(beta0, y)
        return family.b(alpha0, x) / family.sigma(beta0, x) - 0.5 * family.sigma_dx(
            beta0, x
        )

    return DiffusionModel(
        drift=mu,
        diffusion=lambda y: np.ones_like(np.asarray(y, dtype=float)),
        diffusion_deriv=lambda y: np.zeros_like(np.asarray(y, dtype=float)),
        name=f"{family.name}-transformed",
    )


def simulate_estep_bridges(family, data, params, n_draws, config, rng):
    """Simulate ``n_draws`` unit-diffusion bridges per data interval.

    With the exact sampler, each interval runs its own pseudo-marginal
    chain (proposals and hitting counts generated in vectorized pools);
    with the approximate sampler the raw crossing bridges are used.
    Returns a list (per interval) of lists of GridPath draws.
    """
    rng = as_generator(rng)
    alpha0, beta0 = params.alpha, params.beta
    model = _transformed_model(family, alpha0, beta0)
    h_data = np.asarray(family.h(beta0, data.values), dtype=float)
    dt_full = np.diff(data.times)
    n_steps_all = np.maximum(2, np.rint(config.steps_per_unit * dt_full).astype(int))

    out = [None] * data.n_intervals
    by_steps = {}
    for j in range(data.n_intervals):
        by_steps.setdefault((int(n_steps_all[j]), float(dt_full[j])), []).append(j)

    for (n_steps, dt), interval_ids in sorted(by_steps.items()):
        chain_len = config.burn_in + n_draws
        per_row = n_draws if config.sampler == "approx" else chain_len + 1
        per_block = max(1, config.max_rows_per_block // per_row)
        for start in range(0, len(interval_ids), per_block):
            ids = interval_ids[start : start + per_block]
            a_vec = np.repeat(h_data[ids], per_row)
            b_vec = np.repeat(h_data[[j + 1 for j in ids]], per_row)
            batch = sample_bridges_per_row(
                model, a_vec, b_vec, dt, n_steps, config.scheme, rng,
                max_attempts=config.max_attempts,
            )
            if config.sampler == "approx":
                vals = batch.values.reshape(len(ids), n_draws, n_steps + 1)
                for row, j in enumerate(ids):
                    out[j] = [
                        GridPath(t0=data.times[j], delta=dt / n_steps, values=v)
                        for v in vals[row]
                    ]
                continue

            counts, capped = bulk_hit_counts(
                model, batch.values, b_vec, dt, n_steps, config.scheme, rng,
                config.n_hit_draws, cap=config.cap,
            )
            rho = counts.mean(axis=1)
            u = rng.random((len(ids), chain_len))
            vals = batch.values.reshape(len(ids), chain_len + 1, n_steps + 1)
            rho_r = rho.reshape(len(ids), chain_len + 1)
            capped_r = capped.reshape(len(ids), chain_len + 1)
            for row, j in enumerate(ids):
                draws = _scan_chain(
                    model, vals[row], rho_r[row], capped_r[row], u[row],
                    config, n_draws, dt, n_steps,
                    float(h_data[j]), float(h_data[j + 1]), rng,
                )
                out[j] = [
                    GridPath(t0=data.times[j], delta=dt / n_steps, values=v)
                    for v in draws
                ]
    return out


def _scan_chain(model, proposals, rho, capped, u, config, n_draws, dt, n_steps,
                a_end, b_end, rng):
    """Accept/reject scan over one interval's pregenerated proposals.

    If capped proposals exhaust the pool, fresh ones are generated on
    demand (rare; the cap is a pathology guard).
    """
    pos = 0

    def next_prop():
        nonlocal pos, proposals, rho, capped
        while True:
            if pos >= proposals.shape[0]:
                batch = sample_bridges_per_row(
                    model, np.full(64, a_end), np.full(64, b_end), dt, n_steps,
                    config.scheme, rng, max_attempts=config.max_attempts,
                )
                extra_counts, extra_capped = bulk_hit_counts(
                    model, batch.values, np.full(64, b_end), dt, n_steps,
                    config.scheme, rng, config.n_hit_draws, cap=config.cap,
                )
                proposals = np.concatenate([proposals, batch.values])
                rho = np.concatenate([rho, extra_counts.mean(axis=1)])
                capped = np.concatenate([capped, extra_capped])
            idx = pos
            pos += 1
            if not capped[idx]:
                return idx

    cur = next_prop()
    kept = []
    for it in range(config.burn_in + n_draws):
        prop = next_prop()
        if u[it] * rho[cur] < rho[prop]:
            cur = prop
        if it >= config.burn_in:
            kept.append(proposals[cur])
    return kept


# ---------------------------------------------------------------------------
# The EM loop
# ---------------------------------------------------------------------------

@dataclass
class EmStep:
    params: ParamVector
    q_value: float
    n_bridges: int
    wall_seconds: float
    final: bool = False


@dataclass
class EmTrace:
    steps: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def params_history(self):
        return np.array([s.params.as_array() for s in self.steps])


def em_fit(family, data, init, rng, bridges_per_interval=100, mh_config=None,
           max_iter=30, tol=1e-3, final_bridges=1000, scheme=None):
    """Monte Carlo EM: simulate bridges at the current guess, maximize the
    expected complete-data log-likelihood, repeat.

    Fresh bridges are drawn every iteration; once the parameter change
    drops below ``tol`` (max-norm) or ``max_iter`` is reached, one final
    iteration runs with ``final_bridges`` draws per interval.  Returns
    the fitted ParamVector and the iteration trace.
    """
    rng = as_generator(rng)
    config = mh_config or EstepMhConfig()
    if scheme is not None:
        config = EstepMhConfig(**{**config.__dict__, "scheme": Scheme.parse(scheme)})
    params = init
    trace = EmTrace()
    k = family.alpha_dim
    bounds = family.bounds()
    data_x = data.values
    if family.linear_drift is not None:
        family.linear_drift.check_independent(data_x)

    no_improve = 0
    best_q = -np.inf
    converged = False
    for it in range(max_iter + 1):
        final = converged or it == max_iter
        n_draws = final_bridges if final else bridges_per_interval
        t_start = time.perf_counter()
        bridges = simulate_estep_bridges(family, data, params, n_draws, config, rng)
        stack = _BridgeStack(bridges, data)

        def neg_q(vec):
            if np.any(vec[k:] <= 0):
                return np.inf
            return -expected_loglik(
                family, vec[:k], vec[k:], stack, data, params.alpha, params.beta
            )

        res = minimize(
            neg_q,
            params.as_array(),
            method="Nelder-Mead",
            bounds=bounds,
            options={"xatol": 1e-6, "fatol": 1e-9, "maxiter": 2000},
        )
        new_params = ParamVector(alpha=res.x[:k], beta=res.x[k:])
        q_val = -res.fun
        trace.steps.append(
            EmStep(
                params=new_params,
                q_value=q_val,
                n_bridges=stack.n_draws_total,
                wall_seconds=time.perf_counter() - t_start,
                final=final,
            )
        )
        if q_val <= best_q:
            no_improve += 1
            if no_improve >= 3:
                trace.warnings.append(
                    f"objective stagnant for {no_improve} consecutive iterations"
                )
        else:
            no_improve = 0
            best_q = q_val

        step_size = float(np.max(np.abs(new_params.as_array() - params.as_array())))
        params = new_params
        if final:
            break
        if step_size < tol:
            converged = True
    return params, trace


# ---------------------------------------------------------------------------
# Exponential-family (linear drift) reductions
# ---------------------------------------------------------------------------

def expfam_stats(family, beta, bridges, data, beta0):
    """Sufficient statistics (H, B, G) of the linear-drift objective.

    With drift linear in alpha the objective is the quadratic
    ``q(alpha, beta) = alpha . H - alpha . B alpha / 2 + G``; H and B
    collect boundary potentials plus bridge expectations, and G holds
    the alpha-free terms.
    """
    spec = family.linear_drift
    if spec is None:
        raise UsageError("expfam_stats requires a family with linear drift")
    stack = _prepare(bridges, data)
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    k = spec.k

    def integrand(x_tilde):
        sig = family.sigma(beta, x_tilde)
        sp = family.sigma_dx(beta, x_tilde)
        spp = family.sigma_dxx(beta, x_tilde)
        log_sig_dx = sp / sig
        a_vals = [np.asarray(f(x_tilde), dtype=float) for f in spec.basis]
        a_dx = [np.asarray(f(x_tilde), dtype=float) for f in spec.basis_dx]
        outs = []
        for i in range(k):
            outs.append(a_vals[i] * log_sig_dx - 0.5 * a_dx[i])
        for i in range(k):
            for j in range(i, k):
                outs.append(a_vals[i] * a_vals[j] / (sig * sig))
        outs.append(spp * sig - 0.5 * sp * sp)
        return tuple(outs)

    means = stack.interval_means(family, beta, beta0, integrand)
    h_vec = np.empty(k)
    s_hi = _s_components(family, beta, data.values[-1])
    s_lo = _s_components(family, beta, data.values[0])
    for i in range(k):
        h_vec[i] = s_hi[i] - s_lo[i] + float(np.sum(means[i]))
    b_mat = np.empty((k, k))
    pos = k
    for i in range(k):
        for j in range(i, k):
            b_mat[i, j] = b_mat[j, i] = float(np.sum(means[pos]))
            pos += 1
    # the alpha-free data terms; at alpha = 0 the boundary g difference
    # reduces to the log-sigma ratio term
    g0_diff, incr, log_sig = _data_terms(family, np.zeros(k), beta, data)
    g_val = g0_diff + incr + log_sig + 0.25 * float(np.sum(means[pos]))
    return h_vec, b_mat, g_val


def _solve_pd(mat, vec_or_eye):
    try:
        return np.linalg.solve(mat, vec_or_eye)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"singular matrix in linear solve: {exc}") from exc


def expfam_drift_mle(h_vec, b_mat, cond_limit=1e12):
    """Maximizer of the quadratic objective in alpha: solves B alpha = H."""
    b_mat = np.atleast_2d(np.asarray(b_mat, dtype=float))
    h_vec = np.atleast_1d(np.asarray(h_vec, dtype=float))
    if np.linalg.cond(b_mat) > cond_limit:
        raise NumericError(f"curvature matrix condition exceeds {cond_limit:g}")
    return _solve_pd(b_mat, h_vec)


def expfam_profile(family, beta, bridges, data, beta0):
    """Profile objective max_alpha q(alpha, beta) = H.B^-1 H / 2 + G."""
    h_vec, b_mat, g_val = expfam_stats(family, beta, bridges, data, beta0)
    alpha_hat = expfam_drift_mle(h_vec, b_mat)
    return 0.5 * float(h_vec @ alpha_hat) + g_val


def conjugate_posterior(prior_mean, prior_cov, h_lin, b_quad):
    """Normal posterior of the drift parameters given single-draw statistics.

    Posterior covariance (prior_cov^-1 + B)^-1 and mean
    cov (prior_cov^-1 prior_mean + H); inputs must be PD/PSD.
    """
    prior_mean = np.atleast_1d(np.asarray(prior_mean, dtype=float))
    prior_cov = np.atleast_2d(np.asarray(prior_cov, dtype=float))
    h_lin = np.atleast_1d(np.asarray(h_lin, dtype=float))
    b_quad = np.atleast_2d(np.asarray(b_quad, dtype=float))
    try:
        np.linalg.cholesky(prior_cov)
    except np.linalg.LinAlgError as exc:
        raise NumericError("prior covariance is not positive definite") from exc
    prior_prec = _solve_pd(prior_cov, np.eye(prior_cov.shape[0]))
    post_prec = prior_prec + b_quad
    try:
        np.linalg.cholesky(post_prec)
    except np.linalg.LinAlgError as exc:
        raise NumericError("posterior precision is not positive definite") from exc
    cov = _solve_pd(post_prec, np.eye(post_prec.shape[0]))
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (prior_prec @ prior_mean + h_lin)
    return mean, cov
