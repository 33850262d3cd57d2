"""Exact mean-reverting Gaussian (OU) bridge simulation and marginals.

This is the analytic ground truth used by the distributional tests: the
bridge sampler draws an unconditioned path by its exact Gaussian
transition recursion and pins the endpoints with a sinh-ratio
correction, and the marginal law of the bridge at an interior time is
available in closed form by Gaussian conditioning.
"""

import math
from dataclasses import dataclass

import numpy as np

from ._streams import normals
from .errors import UsageError
from .schemes import GridPath

__all__ = [
    "OuParams",
    "transition_moments",
    "sample_ou_bridge",
    "sample_ou_bridges",
    "ou_bridge_marginal",
    "ou_bridge_paths",
]


@dataclass(frozen=True)
class OuParams:
    """Parameters of dX = -theta X dt + sigma dW."""

    theta: float
    sigma: float

    def __post_init__(self):
        if not (self.theta > 0 and self.sigma > 0):
            raise UsageError(
                f"OU parameters must be positive, got theta={self.theta}, sigma={self.sigma}"
            )


def transition_moments(p, t):
    """Mean decay factor and variance of the exact transition over time t."""
    decay = np.exp(-p.theta * np.asarray(t, dtype=float))
    var = p.sigma**2 / (2.0 * p.theta) * -np.expm1(-2.0 * p.theta * np.asarray(t, dtype=float))
    return decay, var


def _sinh_ratio(theta, t, t_end):
    """sinh(theta t)/sinh(theta t_end), in the overflow-free form
    exp(theta (t - t_end)) * expm1(-2 theta t) / expm1(-2 theta t_end)."""
    t = np.asarray(t, dtype=float)
    return np.exp(theta * (t - t_end)) * np.expm1(-2.0 * theta * t) / np.expm1(
        -2.0 * theta * t_end
    )


def _check_times(times):
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size < 2:
        raise UsageError("need an increasing time grid with at least two points")
    if times[0] != 0.0:
        raise UsageError(f"time grid must start at 0, got {times[0]}")
    if np.any(np.diff(times) <= 0):
        raise UsageError("time grid must be strictly increasing")
    return times


def sample_ou_bridges(p, x0, x_end, times, rng, n_samples):
    """Draw ``n_samples`` exact bridges on ``times`` (0 = t_0 < ... < t_end).

    Each row is generated by the exact Gaussian recursion for the free
    process and then shifted by the sinh-ratio correction so that the
    first and last grid values equal ``x0`` and ``x_end`` bit-exactly.
    """
    times = _check_times(times)
    theta = p.theta
    n_pts = times.size
    decay, var = transition_moments(p, np.diff(times))
    sd = np.sqrt(var)

    free = np.empty((n_samples, n_pts))
    free[:, 0] = x0
    for i in range(1, n_pts):
        free[:, i] = decay[i - 1] * free[:, i - 1] + sd[i - 1] * normals(rng, n_samples)

    ratio = _sinh_ratio(theta, times, times[-1])
    out = free + (x_end - free[:, -1])[:, None] * ratio[None, :]
    out[:, 0] = x0
    out[:, -1] = x_end
    return out


def sample_ou_bridge(p, x0, x_end, times, rng):
    """Single exact bridge; returns the value sequence on ``times``."""
    return sample_ou_bridges(p, x0, x_end, times, rng, 1)[0]


def ou_bridge_paths(p, a, b, interval, n_steps, rng, n_samples):
    """Exact bridges on the uniform grid used by the discretized samplers."""
    times = np.linspace(0.0, interval, n_steps + 1)
    return sample_ou_bridges(p, a, b, times, rng, n_samples)


def ou_bridge_path(p, a, b, interval, n_steps, rng):
    values = ou_bridge_paths(p, a, b, interval, n_steps, rng, 1)[0]
    return GridPath(t0=0.0, delta=interval / n_steps, values=values)


def ou_bridge_marginal(p, a, b, interval, t):
    """Exact (mean, variance) of the bridge from a to b at interior time t.

    Obtained by conditioning the jointly Gaussian pair (X_t, X_interval)
    started at a on X_interval = b.
    """
    if not 0.0 < t < interval:
        raise UsageError(f"t={t} must lie strictly inside (0, {interval})")
    d_t, v_t = transition_moments(p, t)
    d_rest, v_rest = transition_moments(p, interval - t)
    d_full, v_full = transition_moments(p, interval)
    # cov(X_t, X_T | X_0 = a) = decay(T - t) * var(t)
    cov = d_rest * v_t
    gain = cov / v_full
    mean = a * d_t + gain * (b - a * d_full)
    var = v_t - gain * cov
    return float(mean), float(var)
