"""One-dimensional diffusion models and their analytic machinery.

A model is the pair of SDE coefficients ``dX = drift(X) dt + diffusion(X) dW``
on an open state interval, with optional analytic densities.  From the
coefficients this module derives the classical scalar summaries of a
one-dimensional diffusion: the speed-measure density, the invariant
density, the scale function, the Lamperti (unit-diffusion) transform,
and an explicit lower bound on the spectral gap of the generator.

Built-in models are registered by name ("ou", "hyperbolic") and can be
described by a small JSON spec so the CLI can reconstruct them.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq
from scipy.special import k1

from .errors import DomainError, ModelError, NumericError, UsageError

__all__ = [
    "DiffusionModel",
    "SpeedMeasureSummary",
    "make_model",
    "model_from_spec",
    "load_model_spec",
    "register_model",
    "speed_density",
    "invariant_density",
    "speed_measure_summary",
    "scale_function",
    "spectral_gap_lower_bound",
    "lamperti_transform",
    "lamperti_inverse",
    "transformed_drift",
]

QUAD_TOL = 1e-10
TAIL_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class DiffusionModel:
    """Coefficients and metadata of a scalar diffusion.

    All coefficient callables must accept and return numpy arrays
    (scalars work too).  Instances are immutable and safe to share
    across workers; derived summaries are cached per instance.

    Parameters
    ----------
    drift, diffusion, diffusion_deriv : callable
        Drift, diffusion coefficient (must be positive on the state
        interval wherever paths live) and its first derivative.
    diffusion_second_deriv : callable, optional
        Second derivative of the diffusion coefficient; when absent,
        consumers fall back to central finite differences.
    state_interval : (float, float)
        Open interval (lo, hi); endpoints may be +-inf.
    reference_point : float
        Base point of the speed-density and scale-function integrals;
        must lie strictly inside the state interval.
    analytic_transition : callable, optional
        (t, x, y) -> transition density, when known in closed form.
    analytic_stationary : callable, optional
        x -> stationary density, when known in closed form.
    """

    drift: callable
    diffusion: callable
    diffusion_deriv: callable
    diffusion_second_deriv: callable = None
    state_interval: tuple = (-math.inf, math.inf)
    reference_point: float = 0.0
    analytic_transition: callable = None
    analytic_stationary: callable = None
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        lo, hi = self.state_interval
        if not lo < self.reference_point < hi:
            raise UsageError(
                f"reference_point {self.reference_point} not inside "
                f"state interval ({lo}, {hi})"
            )

    def contains(self, x):
        lo, hi = self.state_interval
        return (x > lo) & (x < hi)

    def require_inside(self, x, what="x"):
        if not np.all(self.contains(x) & np.isfinite(x)):
            raise DomainError(f"{what}={x!r} outside open state interval {self.state_interval}")


@dataclass(frozen=True)
class SpeedMeasureSummary:
    """Total speed-measure mass and the window used to compute it."""

    total_mass: float
    truncation_bounds: tuple
    quadrature_tolerance: float


def _quad(f, a, b, tol=QUAD_TOL):
    if a == b:
        return 0.0
    val, err = quad(f, a, b, epsabs=tol, epsrel=1e-10, limit=200)
    if not math.isfinite(val):
        raise NumericError(f"quadrature of {f} over ({a}, {b}) diverged")
    return val


def _drift_exponent(model, x):
    """2 * integral_z^x drift/diffusion^2, the exponent of the speed density."""

    def integrand(y):
        s = float(model.diffusion(y))
        return 2.0 * float(model.drift(y)) / (s * s)

    return _quad(integrand, model.reference_point, x)


def speed_density(model, x):
    """Speed-measure density m(x) = diffusion(x)^-2 * exp(2 int_z^x drift/diffusion^2).

    Raises DomainError outside the open state interval and NumericError
    if the inner quadrature diverges.
    """
    model.require_inside(x)
    s = float(model.diffusion(x))
    if not s > 0.0:
        raise ModelError(f"diffusion({x}) = {s} is not positive")
    return math.exp(_drift_exponent(model, x)) / (s * s)


def _shrink_into(model, bound, side):
    """Nudge a finite endpoint strictly inside the open interval."""
    z = model.reference_point
    eps = 1e-9 * max(1.0, abs(bound), abs(z))
    return bound + eps if side == "lo" else bound - eps


def _find_truncation(model, tol=TAIL_TOL):
    """Expand a window around the reference point until the speed-measure
    mass outside it is negligible (< tol of the total), starting from a
    unit half-width and doubling.  Finite interval endpoints cap the
    expansion.  Non-integrable models are rejected.
    """
    lo_lim, hi_lim = model.state_interval
    z = model.reference_point
    m = lambda y: speed_density(model, y)

    lo = z - 1.0 if lo_lim == -math.inf else _shrink_into(model, lo_lim, "lo")
    hi = z + 1.0 if hi_lim == math.inf else _shrink_into(model, hi_lim, "hi")
    lo = min(lo, z - 1e-6)
    hi = max(hi, z + 1e-6)
    mass = _quad(m, lo, hi)

    for _ in range(200):
        grew = False
        if lo_lim == -math.inf:
            new_lo = z - 2.0 * (z - lo)
            shell = _quad(m, new_lo, lo)
            if shell > tol * mass or shell > tol:
                lo, mass, grew = new_lo, mass + shell, True
        if hi_lim == math.inf:
            new_hi = z + 2.0 * (hi - z)
            shell = _quad(m, hi, new_hi)
            if shell > tol * mass or shell > tol:
                hi, mass, grew = new_hi, mass + shell, True
        if not grew:
            break
        if not math.isfinite(mass) or hi - lo > 1e12:
            raise ModelError("speed measure appears to be infinite (non-ergodic model)")
    else:
        raise ModelError("speed-measure truncation window failed to converge")

    if not (math.isfinite(mass) and mass > 0.0):
        raise ModelError(f"speed-measure mass {mass} is not finite and positive")
    return SpeedMeasureSummary(total_mass=mass, truncation_bounds=(lo, hi),
                               quadrature_tolerance=QUAD_TOL)


_SUMMARY_CACHE = {}


def speed_measure_summary(model):
    """Cached total mass of the speed measure (finite or ModelError)."""
    summary = _SUMMARY_CACHE.get(id(model))
    if summary is None:
        summary = _find_truncation(model)
        _SUMMARY_CACHE[id(model)] = summary
    return summary


def invariant_density(model, x):
    """Stationary density m(x)/M; requires a finite speed measure."""
    return speed_density(model, x) / speed_measure_summary(model).total_mass


def _scale_integrand(model):
    def integrand(y):
        s = float(model.diffusion(y))
        return math.exp(-_drift_exponent(model, y))

    return integrand


def scale_function(model, x):
    """Scale function S(x) = int_z^x (diffusion^2(y) m(y))^-1 dy.

    Note diffusion^2 * m = exp(drift exponent), so the integrand is the
    reciprocal speed-density exponential.
    """
    model.require_inside(x)
    return _quad(_scale_integrand(model), model.reference_point, x)


def _segment_integrals(f, points):
    return np.array([_quad(f, a, b) for a, b in zip(points[:-1], points[1:])])


def _inverse_on_grid(s_values, x_values):
    """Monotone inverse of tabulated S by bisection plus linear refinement."""

    def inverse(y):
        lo, hi = 0, len(s_values) - 1
        if y <= s_values[0]:
            return x_values[0]
        if y >= s_values[-1]:
            return x_values[-1]
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if s_values[mid] <= y:
                lo = mid
            else:
                hi = mid
        w = (y - s_values[lo]) / (s_values[hi] - s_values[lo])
        return x_values[lo] + w * (x_values[hi] - x_values[lo])

    return inverse


def spectral_gap_lower_bound(model, grid, tail_tolerance=1e-4):
    """Explicit lower bound on the spectral gap of the generator.

    Builds, on the supplied increasing state-space grid, the tail-mass
    ratios phi and psi of the speed measure, maps them through the
    inverse scale function, and returns

        C = 1 / (8 * inf_x max{ sup_{y>=x} phi^2(S^-1(y)),
                                sup_{y<=x} psi^2(S^-1(y)) })

    evaluated at the grid's scale-function images.  The grid must cover
    the effective support of the stationary density.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 3 or np.any(np.diff(grid) <= 0):
        raise UsageError("grid must be an increasing 1-d sequence of length >= 3")
    model.require_inside(grid, "grid")
    summary = speed_measure_summary(model)
    q_lo, q_hi = summary.truncation_bounds
    total = summary.total_mass

    m = lambda y: speed_density(model, y)
    left_tail = _quad(m, q_lo, grid[0]) if grid[0] > q_lo else 0.0
    right_tail = _quad(m, grid[-1], q_hi) if grid[-1] < q_hi else 0.0
    if (left_tail + right_tail) / total > tail_tolerance:
        raise DomainError(
            f"grid too narrow: stationary tail mass {(left_tail + right_tail) / total:.3g} "
            f"outside [{grid[0]}, {grid[-1]}] exceeds {tail_tolerance}"
        )

    seg_mass = _segment_integrals(m, grid)
    below = left_tail + np.concatenate([[0.0], np.cumsum(seg_mass)])
    above = total - below

    m_grid = np.array([m(x) for x in grid])
    sig_grid = np.asarray(model.diffusion(grid), dtype=float)
    phi = above / (sig_grid * m_grid)
    psi = below / (sig_grid * m_grid)

    seg_scale = _segment_integrals(_scale_integrand(model), grid)
    s_grid = np.concatenate([[0.0], np.cumsum(seg_scale)])
    s_grid += scale_function(model, grid[0])
    if np.any(np.diff(s_grid) <= 0):
        raise NumericError("scale function is not strictly increasing on the grid")

    s_inv = _inverse_on_grid(s_grid, grid)
    x_back = np.array([s_inv(y) for y in s_grid])
    phi2 = np.interp(x_back, grid, phi) ** 2
    psi2 = np.interp(x_back, grid, psi) ** 2

    c1 = np.maximum.accumulate(phi2[::-1])[::-1]  # sup over y >= x
    c0 = np.maximum.accumulate(psi2)              # sup over y <= x
    bound = 1.0 / (8.0 * float(np.min(np.maximum(c1, c0))))
    if not bound > 0.0:
        raise NumericError("spectral gap bound collapsed to zero")
    return bound


def lamperti_transform(model, x, x_star=None):
    """Unit-diffusion transform h(x) = int_{x*}^x diffusion(y)^-1 dy."""
    model.require_inside(x)
    if x_star is None:
        x_star = model.reference_point

    def integrand(y):
        return 1.0 / float(model.diffusion(y))

    return _quad(integrand, x_star, x)


def lamperti_inverse(model, y, x_star=None, xtol=1e-12):
    """Invert the Lamperti transform by monotone root finding.

    Raises DomainError when ``y`` cannot be bracketed inside the state
    interval (target outside the transform's range).
    """
    if x_star is None:
        x_star = model.reference_point
    lo_lim, hi_lim = model.state_interval

    f = lambda c: lamperti_transform(model, c, x_star) - y
    lo = hi = x_star
    step = 1.0
    for _ in range(200):
        if y >= 0:
            hi = x_star + step
            if hi >= hi_lim:
                hi = _shrink_into(model, hi_lim, "hi") if math.isfinite(hi_lim) else hi
                if math.isfinite(hi_lim) and f(hi) < 0:
                    raise DomainError(f"inverse transform target {y} outside range")
            if f(hi) >= 0:
                break
        else:
            lo = x_star - step
            if lo <= lo_lim:
                lo = _shrink_into(model, lo_lim, "lo") if math.isfinite(lo_lim) else lo
                if math.isfinite(lo_lim) and f(lo) > 0:
                    raise DomainError(f"inverse transform target {y} outside range")
            if f(lo) <= 0:
                break
        step *= 2.0
    else:
        raise DomainError(f"could not bracket inverse transform target {y}")
    if lo == hi:
        return x_star
    return brentq(f, min(lo, hi), max(lo, hi), xtol=xtol)


def transformed_drift(model, y, x_star=None):
    """Drift of the unit-diffusion process obtained by the Lamperti transform.

    mu(y) = drift(x)/diffusion(x) - diffusion'(x)/2 at x = h^-1(y).
    """
    x = lamperti_inverse(model, y, x_star)
    return float(model.drift(x)) / float(model.diffusion(x)) - 0.5 * float(
        model.diffusion_deriv(x)
    )


# ---------------------------------------------------------------------------
# Built-in models and the registry
# ---------------------------------------------------------------------------

_REGISTRY = {}


def register_model(name, factory):
    """Register a model factory: factory(**params) -> DiffusionModel."""
    _REGISTRY[name] = factory


def make_model(name, **params):
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise UsageError(f"unknown model {name!r}; registered: {sorted(_REGISTRY)}") from None
    return factory(**params)


def ou_model(theta=0.5, sigma=1.0, reference_point=0.0):
    """Mean-reverting Gaussian diffusion dX = -theta X dt + sigma dW."""
    theta = float(theta)
    sigma = float(sigma)
    if theta <= 0 or sigma <= 0:
        raise UsageError("ou model requires theta > 0 and sigma > 0")
    stat_var = sigma * sigma / (2.0 * theta)

    def transition(t, x, y):
        mean = x * np.exp(-theta * t)
        var = stat_var * -np.expm1(-2.0 * theta * t)
        return np.exp(-0.5 * (y - mean) ** 2 / var) / np.sqrt(2.0 * np.pi * var)

    def stationary(x):
        return np.exp(-0.5 * np.asarray(x) ** 2 / stat_var) / math.sqrt(
            2.0 * math.pi * stat_var
        )

    return DiffusionModel(
        drift=lambda x: -theta * np.asarray(x, dtype=float),
        diffusion=lambda x: np.full_like(np.asarray(x, dtype=float), sigma),
        diffusion_deriv=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        diffusion_second_deriv=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        reference_point=reference_point,
        analytic_transition=transition,
        analytic_stationary=stationary,
        name="ou",
        params={"theta": theta, "sigma": sigma},
    )


def hyperbolic_model(theta=1.0, sigma=1.0, reference_point=0.0):
    """Diffusion dX = -theta X / sqrt(1 + X^2) dt + sigma dW.

    Its stationary law is the standardized symmetric hyperbolic
    distribution, exp(-c sqrt(1+x^2)) / (2 K_1(c)) with c = 2 theta / sigma^2.
    """
    theta = float(theta)
    sigma = float(sigma)
    if theta <= 0 or sigma <= 0:
        raise UsageError("hyperbolic model requires theta > 0 and sigma > 0")
    c = 2.0 * theta / (sigma * sigma)
    norm = 2.0 * k1(c)

    def stationary(x):
        return np.exp(-c * np.sqrt(1.0 + np.asarray(x, dtype=float) ** 2)) / norm

    return DiffusionModel(
        drift=lambda x: -theta * np.asarray(x, dtype=float)
        / np.sqrt(1.0 + np.asarray(x, dtype=float) ** 2),
        diffusion=lambda x: np.full_like(np.asarray(x, dtype=float), sigma),
        diffusion_deriv=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        diffusion_second_deriv=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        reference_point=reference_point,
        analytic_stationary=stationary,
        name="hyperbolic",
        params={"theta": theta, "sigma": sigma},
    )


register_model("ou", ou_model)
register_model("hyperbolic", hyperbolic_model)

_EXPR_NAMES = {
    name: getattr(np, name)
    for name in (
        "abs", "arccos", "arcsin", "arctan", "cos", "cosh", "exp", "expm1",
        "log", "log1p", "sin", "sinh", "sqrt", "tan", "tanh", "where",
        "pi", "e",
    )
    if hasattr(np, name)
}


def _compile_expr(expr, what):
    code = compile(expr, f"<{what}>", "eval")

    def f(x):
        return np.asarray(eval(code, {"__builtins__": {}}, {**_EXPR_NAMES, "np": np, "x": x}),
                          dtype=float) + np.zeros_like(np.asarray(x, dtype=float))

    return f


def custom_model(parameters, state_interval=(-math.inf, math.inf), reference_point=0.0):
    """Build a model from coefficient expressions in the variable ``x``.

    ``parameters`` must contain "drift", "diffusion" and "diffusion_deriv"
    expressions; "diffusion_second_deriv" is optional.
    """
    required = ("drift", "diffusion", "diffusion_deriv")
    missing = [k for k in required if k not in parameters]
    if missing:
        raise UsageError(f"custom model spec missing expressions: {missing}")
    second = parameters.get("diffusion_second_deriv")
    return DiffusionModel(
        drift=_compile_expr(parameters["drift"], "drift"),
        diffusion=_compile_expr(parameters["diffusion"], "diffusion"),
        diffusion_deriv=_compile_expr(parameters["diffusion_deriv"], "diffusion_deriv"),
        diffusion_second_deriv=_compile_expr(second, "diffusion_second_deriv")
        if second
        else None,
        state_interval=tuple(state_interval),
        reference_point=reference_point,
        name="custom",
        params=dict(parameters),
    )


register_model("custom", custom_model)


def model_from_spec(spec):
    """Build a model from a parsed spec dict {name, parameters, ...}."""
    if "name" not in spec:
        raise UsageError("model spec requires a 'name' field")
    name = spec["name"]
    params = dict(spec.get("parameters", {}))
    extra = {}
    if "reference_point" in spec:
        extra["reference_point"] = float(spec["reference_point"])
    if name == "custom":
        if "state_interval" in spec:
            si = spec["state_interval"]
            extra["state_interval"] = (
                -math.inf if si[0] is None else float(si[0]),
                math.inf if si[1] is None else float(si[1]),
            )
        return make_model(name, parameters=params, **extra)
    return make_model(name, **params, **extra)


def load_model_spec(path):
    with open(path) as fh:
        return model_from_spec(json.load(fh))
