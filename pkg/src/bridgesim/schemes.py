"""Discretized SDE simulation on uniform grids (Euler and Milstein).

The batch simulator is the workhorse of every sampler in the package:
it advances many independent paths at once with one vectorized step per
grid point, always consuming the same number of variates per step so
the random stream layout is independent of path fates.

Paths that leave the open state interval are not clamped or reflected;
they are marked dead at the offending step (callers count them as
rejections) and their state is frozen so the remaining arithmetic stays
finite.  The single-path entry points raise instead.
"""

import csv
import enum
import math
from dataclasses import dataclass

import numpy as np

from ._streams import normals
from .errors import BoundaryViolationError, UsageError

__all__ = [
    "GridPath",
    "Scheme",
    "simulate_path",
    "simulate_pdelta",
    "simulate_batch",
    "simulate_pdelta_batch",
    "write_path_csv",
    "read_path_csv",
    "write_long_csv",
]


class Scheme(enum.Enum):
    """Discretization scheme; MILSTEIN needs the diffusion derivative."""

    EULER = "euler"
    MILSTEIN = "milstein"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise UsageError(f"unknown scheme {value!r}") from None


@dataclass(frozen=True)
class GridPath:
    """A trajectory on a uniform time grid.

    ``delta`` is the step size; ``values`` has one entry per grid point
    (length = number of steps + 1).
    """

    t0: float
    delta: float
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)
        if self.delta <= 0:
            raise UsageError(f"step size must be positive, got {self.delta}")
        if vals.ndim != 1 or vals.size < 2:
            raise UsageError("a grid path needs at least two points")

    @property
    def n_steps(self):
        return self.values.size - 1

    @property
    def times(self):
        return self.t0 + self.delta * np.arange(self.values.size)

    def same_grid(self, other):
        return (
            self.values.size == other.values.size
            and self.delta == other.delta
            and self.t0 == other.t0
        )


def require_same_grid(x, y):
    if not x.same_grid(y):
        raise UsageError(
            f"mismatched grids: ({x.t0}, {x.delta}, {x.n_steps}) vs "
            f"({y.t0}, {y.delta}, {y.n_steps})"
        )


def simulate_batch(model, x0, interval, n_steps, scheme, rng):
    """Advance ``len(x0)`` independent paths over [0, interval].

    Returns ``(values, fail_step)`` where ``values`` has shape
    ``(len(x0), n_steps + 1)`` and ``fail_step[i]`` is the grid index at
    which path i left the state interval (-1 if it never did).  Dead
    paths hold the reference point from their failure onward; exactly
    ``n_steps`` normals per path are consumed regardless of failures.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if n_steps < 1:
        raise UsageError(f"need at least one step, got {n_steps}")
    if interval <= 0:
        raise UsageError(f"interval must be positive, got {interval}")
    scheme = Scheme.parse(scheme)
    n_paths = x0.size
    delta = interval / n_steps
    sqrt_delta = math.sqrt(delta)
    lo, hi = model.state_interval
    milstein = scheme is Scheme.MILSTEIN

    values = np.empty((n_paths, n_steps + 1))
    values[:, 0] = x0
    x = x0.copy()
    fail_step = np.full(n_paths, -1, dtype=np.int64)
    safe = model.reference_point

    bad0 = ~((x0 > lo) & (x0 < hi) & np.isfinite(x0))
    if np.any(bad0):
        fail_step[bad0] = 0
        x[bad0] = safe

    for k in range(n_steps):
        xi = normals(rng, n_paths)
        a = np.asarray(model.drift(x), dtype=float)
        s = np.asarray(model.diffusion(x), dtype=float)
        step = a * delta + s * sqrt_delta * xi
        if milstein:
            sp = np.asarray(model.diffusion_deriv(x), dtype=float)
            step += 0.5 * s * sp * delta * (xi * xi - 1.0)
        x = x + step
        bad = (fail_step < 0) & ~((x > lo) & (x < hi) & np.isfinite(x))
        if np.any(bad):
            fail_step[bad] = k + 1
        dead = fail_step >= 0
        if np.any(dead):
            x[dead] = safe
        values[:, k + 1] = x
    return values, fail_step


def simulate_path(model, x0, interval, n_steps, scheme, rng):
    """Simulate one path; raises BoundaryViolationError if it leaves the
    state interval, carrying the offending grid index."""
    values, fail_step = simulate_batch(model, [x0], interval, n_steps, scheme, rng)
    if fail_step[0] >= 0:
        raise BoundaryViolationError(
            f"path left state interval {model.state_interval} at step {fail_step[0]}",
            step_index=int(fail_step[0]),
        )
    return GridPath(t0=0.0, delta=interval / n_steps, values=values[0])


def simulate_pdelta_batch(model, b, interval, n_steps, scheme, rng):
    """Batch of diffusions whose time-0 value is (approximately) a draw
    from the ``interval``-step transition density out of ``b``.

    Simulates from b over [0, 2*interval] with 2*n_steps steps and keeps
    the second half, re-indexed to [0, interval].  A path is dead if it
    left the interval anywhere in the full window.
    """
    b = np.atleast_1d(np.asarray(b, dtype=float))
    values, fail_step = simulate_batch(
        model, b, 2.0 * interval, 2 * n_steps, scheme, rng
    )
    return values[:, n_steps:].copy(), fail_step


def simulate_pdelta(model, b, interval, n_steps, scheme, rng):
    """Single-path version of :func:`simulate_pdelta_batch`."""
    values, fail_step = simulate_pdelta_batch(model, [b], interval, n_steps, scheme, rng)
    if fail_step[0] >= 0:
        raise BoundaryViolationError(
            f"path left state interval {model.state_interval} at step {fail_step[0]}",
            step_index=int(fail_step[0]),
        )
    return GridPath(t0=0.0, delta=interval / n_steps, values=values[0])


# ---------------------------------------------------------------------------
# Path file formats
# ---------------------------------------------------------------------------

def _fmt(x):
    return format(float(x), ".17g")


def write_path_csv(path, stream):
    """Write a path as "t,x" rows at full double precision."""
    writer = csv.writer(stream)
    writer.writerow(["t", "x"])
    for t, v in zip(path.times, path.values):
        writer.writerow([_fmt(t), _fmt(v)])


def read_path_csv(stream):
    reader = csv.reader(stream)
    header = next(reader, None)
    if header is None or [h.strip() for h in header[:2]] != ["t", "x"]:
        raise UsageError("path CSV must start with a 't,x' header")
    times, vals = [], []
    for row in reader:
        if not row:
            continue
        times.append(float(row[0]))
        vals.append(float(row[1]))
    times = np.asarray(times)
    if times.size < 2:
        raise UsageError("path CSV needs at least two rows")
    deltas = np.diff(times)
    if not np.allclose(deltas, deltas[0], rtol=1e-9, atol=0.0):
        raise UsageError("path CSV grid is not uniform")
    return GridPath(t0=float(times[0]), delta=float(deltas[0]), values=np.asarray(vals))


def write_long_csv(paths, stream):
    """Write many paths in long format: sample_id,t,x."""
    writer = csv.writer(stream)
    writer.writerow(["sample_id", "t", "x"])
    for i, path in enumerate(paths):
        for t, v in zip(path.times, path.values):
            writer.writerow([i, _fmt(t), _fmt(v)])
