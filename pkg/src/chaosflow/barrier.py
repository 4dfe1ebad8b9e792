"""
Barriers and the survival probability alpha^t(s, y, g).

alpha^t(s, y, g) is the probability that y + w_{r-s} stays strictly below g(r)
for every r in [s, t]. It is computed by three backends:

  - closed forms for constant and linear barriers (reflection principle and
    the Bachelier-Levy formula),
  - a Crank-Nicolson solve of the backward problem
        gamma_s + 1/2 gamma_zz - g'(s) gamma_z = 0,  gamma(t, z) = 1,  gamma(s, g(0)) = 0
    in the straightened coordinate z = y - (g(s) - g(0)),
  - the first-passage representation through a line u -> z - c u lying below
    the barrier.
"""

import csv
import logging

import numpy as np
from scipy import integrate
from scipy.interpolate import CubicSpline, RegularGridInterpolator
from scipy.special import erf, log_ndtr, ndtr
from scipy.stats import invgauss

from .errors import (
    DomainError,
    GridTooCoarse,
    LineNotBelowBarrier,
    NearBarrier,
    NotMonotone,
    QuadratureNotConverged,
    UnsupportedBarrier,
)
from .pde import BackwardSolver

logger = logging.getLogger(__name__)

# Below this survival probability the log-derivative is not reported.
EPS_ALPHA = 1e-8
# Default depth of the truncated domain, in standard deviations sqrt(t).
DEPTH = 6.0
# The truncation level must lie at least this many sqrt(t) below min g.
MIN_DEPTH = 3.0
# Terminal strip, as a fraction of t, filled from the line formula when g is linear there.
TERMINAL_LAYER = 0.05
# Largest positive d alpha / dy accepted as rounding noise.
MONOTONE_SLACK = 1e-8
_SQRT_2PI = np.sqrt(2.0 * np.pi)


class Barrier:
    """A continuous function g on [0, horizon] with g(0) > 0."""

    kind = None

    def __init__(self, horizon=1.0):
        self.horizon = float(horizon)

    def __call__(self, s):
        raise NotImplementedError

    def slope(self, s):
        """Derivative (a.e. slope for piecewise barriers)."""
        raise NotImplementedError

    def _check_start(self):
        if not float(self(0.0)) > 0.0:
            raise UnsupportedBarrier(f"{self.kind} barrier must satisfy g(0) > 0")

    def minimum(self, t=None):
        t = self.horizon if t is None else t
        return float(np.min(self(np.linspace(0.0, t, 2049))))

    def to_dict(self):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.to_dict()})"


class ConstantBarrier(Barrier):
    kind = "constant"

    def __init__(self, level, horizon=1.0):
        super().__init__(horizon)
        self.level = float(level)
        self._check_start()

    def __call__(self, s):
        return np.full(np.shape(s), self.level) if np.ndim(s) else self.level

    def slope(self, s):
        return np.zeros(np.shape(s)) if np.ndim(s) else 0.0

    def to_dict(self):
        return {"kind": self.kind, "level": self.level, "horizon": self.horizon}


class LinearBarrier(Barrier):
    kind = "linear"

    def __init__(self, level, slope, horizon=1.0):
        super().__init__(horizon)
        self.level = float(level)
        self.rate = float(slope)
        self._check_start()

    def __call__(self, s):
        return self.level + self.rate * np.asarray(s, dtype=float) if np.ndim(s) else self.level + self.rate * s

    def slope(self, s):
        return np.full(np.shape(s), self.rate) if np.ndim(s) else self.rate

    def to_dict(self):
        return {"kind": self.kind, "level": self.level, "slope": self.rate, "horizon": self.horizon}


class PiecewiseLinearBarrier(Barrier):
    kind = "piecewise_linear"

    def __init__(self, knots, values, horizon=1.0):
        super().__init__(horizon)
        knots = np.asarray(knots, dtype=float)
        values = np.asarray(values, dtype=float)
        if knots.shape != values.shape or knots.size < 2:
            raise ValueError("knots and values must have the same length >= 2")
        if np.any(np.diff(knots) <= 0):
            raise ValueError("knots must be strictly increasing")
        if knots[0] > 0.0 or knots[-1] < self.horizon:
            raise ValueError("knots must cover [0, horizon]")
        self.knots = knots
        self.values = values
        self._check_start()

    def __call__(self, s):
        out = np.interp(s, self.knots, self.values)
        return out if np.ndim(s) else float(out)

    def slope(self, s):
        slopes = np.diff(self.values) / np.diff(self.knots)
        idx = np.clip(np.searchsorted(self.knots, s, side="right") - 1, 0, slopes.size - 1)
        out = slopes[idx]
        return out if np.ndim(s) else float(out)

    def minimum(self, t=None):
        t = self.horizon if t is None else t
        inside = self.knots[self.knots <= t]
        return float(min(np.min(self(inside)), self(t)))

    def to_dict(self):
        return {
            "kind": self.kind,
            "knots": self.knots.tolist(),
            "values": self.values.tolist(),
            "horizon": self.horizon,
        }


class SampledBarrier(Barrier):
    """Barrier given by samples on a time grid, interpolated linearly or by a cubic spline."""

    kind = "sampled"

    def __init__(self, times, values, interpolation="linear", horizon=None):
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float)
        super().__init__(times[-1] if horizon is None else horizon)
        if times.shape != values.shape or times.size < 2:
            raise ValueError("times and values must have the same length >= 2")
        if np.any(np.diff(times) <= 0) or times[0] > 0.0 or times[-1] < self.horizon:
            raise ValueError("sample times must be increasing and cover [0, horizon]")
        if interpolation not in ("linear", "cubic"):
            raise ValueError(f"unknown interpolation rule {interpolation!r}")
        self.times = times
        self.values = values
        self.interpolation = interpolation
        self._spline = CubicSpline(times, values) if interpolation == "cubic" else None
        self._linear = PiecewiseLinearBarrier(times, values, self.horizon) if interpolation == "linear" else None
        self._check_start()

    @classmethod
    def from_grid(cls, grid, values, interpolation="linear"):
        return cls(grid.times, values, interpolation, grid.horizon)

    def __call__(self, s):
        if self._spline is None:
            return self._linear(s)
        out = self._spline(s)
        return out if np.ndim(s) else float(out)

    def slope(self, s):
        if self._spline is None:
            return self._linear.slope(s)
        out = self._spline(s, 1)
        return out if np.ndim(s) else float(out)

    def to_dict(self):
        return {
            "kind": self.kind,
            "times": self.times.tolist(),
            "values": self.values.tolist(),
            "interpolation": self.interpolation,
            "horizon": self.horizon,
        }


def sine_barrier(level=1.0, amplitude=0.5, frequency=1.0, n_samples=257, horizon=1.0, interpolation="linear"):
    """Sampled barrier level + amplitude * sin(2 pi frequency t)."""
    times = np.linspace(0.0, horizon, n_samples)
    return SampledBarrier(times, level + amplitude * np.sin(2.0 * np.pi * frequency * times), interpolation, horizon)


def barrier_from_dict(spec):
    """
    Build a barrier from its JSON declaration.

    Args:
        spec: dict with a "kind" tag and the variant's parameters

    Returns:
        Barrier
    """
    spec = dict(spec)
    kind = spec.pop("kind", None)
    horizon = spec.pop("horizon", 1.0)
    try:
        if kind == "constant":
            return ConstantBarrier(spec["level"], horizon)
        if kind == "linear":
            return LinearBarrier(spec["level"], spec["slope"], horizon)
        if kind == "piecewise_linear":
            return PiecewiseLinearBarrier(spec["knots"], spec["values"], horizon)
        if kind == "sampled":
            interpolation = spec.get("interpolation", "linear")
            if spec.get("function") == "sine":
                return sine_barrier(
                    spec.get("level", 1.0),
                    spec.get("amplitude", 0.5),
                    spec.get("frequency", 1.0),
                    spec.get("n_samples", 257),
                    horizon,
                    interpolation,
                )
            return SampledBarrier(spec["times"], spec["values"], interpolation, horizon)
    except KeyError as e:
        raise ValueError(f"{kind} barrier is missing parameter {e}") from e
    raise ValueError(f"unknown barrier kind {kind!r}")


# Closed forms

def _line_parameters(barrier, s):
    if isinstance(barrier, ConstantBarrier):
        return barrier.level, 0.0
    if isinstance(barrier, LinearBarrier):
        return barrier(s), barrier.rate
    raise UnsupportedBarrier(f"no closed form for {barrier.kind} barriers")


def _line_formula(start, rate, s, y, t, derivative):
    """Survival below the line r -> start + rate (r - s), or its y-derivative."""
    s, y, start = np.broadcast_arrays(np.asarray(s, float), np.asarray(y, float), np.asarray(start, float))
    T = t - s
    dist = start - y
    alive = (dist > 0) & (T > 0)
    Tc = np.where(alive, T, 1.0)
    dc = np.where(alive, dist, 1.0)
    sq = np.sqrt(Tc)
    z1 = (dc + rate * Tc) / sq
    z2 = (rate * Tc - dc) / sq
    if derivative:
        if rate == 0.0:
            value = -2.0 * np.exp(-0.5 * z1**2) / (_SQRT_2PI * sq)
        else:
            value = -(2.0 * np.exp(-0.5 * z1**2) / (_SQRT_2PI * sq) + 2.0 * rate * np.exp(-2.0 * dc * rate + log_ndtr(z2)))
        out = np.where(alive, value, 0.0)
    else:
        if rate == 0.0:
            value = erf(dc / np.sqrt(2.0 * Tc))
        else:
            value = ndtr(z1) - np.exp(-2.0 * dc * rate + log_ndtr(z2))
        terminal = (T <= 0) & (y < start)
        out = np.where(alive, np.clip(value, 0.0, 1.0), np.where(terminal, 1.0, 0.0))
    return out if out.ndim else float(out)


def _closed_form(barrier, s, y, t, derivative):
    start, rate = _line_parameters(barrier, s)
    return _line_formula(start, rate, s, y, t, derivative)


def alpha_closed_form(barrier, s, y, t):
    """
    Survival probability for a constant or linear barrier.

    Constant a:  2 Phi((a - y) / sqrt(t - s)) - 1.
    Linear a + b r, with a' = a + b s - y and T = t - s:
        Phi((a' + b T) / sqrt(T)) - exp(-2 a' b) Phi((b T - a') / sqrt(T)).

    Vectorized in s and y. Points on or above the barrier give 0; s = t gives
    1 below g(t).
    """
    return _closed_form(barrier, s, y, t, derivative=False)


def dalpha_closed_form(barrier, s, y, t):
    """y-derivative of alpha_closed_form (0 on the terminal slice)."""
    return _closed_form(barrier, s, y, t, derivative=True)


class ClosedFormSurvival:
    """Survival model of a constant or linear barrier for the horizon t."""

    backend = "closed_form"

    def __init__(self, barrier, horizon):
        _line_parameters(barrier, 0.0)
        self.barrier = barrier
        self.horizon = float(horizon)
        self.y_min = barrier.minimum(horizon) - DEPTH * np.sqrt(horizon)

    def alpha(self, s, y):
        return alpha_closed_form(self.barrier, s, y, self.horizon)

    def dalpha_dy(self, s, y):
        return dalpha_closed_form(self.barrier, s, y, self.horizon)

    def dlog_alpha_dy(self, s, y):
        a = np.maximum(self.alpha(s, y), EPS_ALPHA)
        return self.dalpha_dy(s, y) / a


class FlatSurvival:
    """Survival model constant in y: zero drift, no barrier."""

    backend = "flat"
    barrier = None

    def __init__(self, horizon, y_min=-8.0):
        self.horizon = float(horizon)
        self.y_min = y_min

    def alpha(self, s, y):
        return np.ones(np.broadcast(s, y).shape) if np.ndim(s) or np.ndim(y) else 1.0

    def dalpha_dy(self, s, y):
        return np.zeros(np.broadcast(s, y).shape) if np.ndim(s) or np.ndim(y) else 0.0

    def dlog_alpha_dy(self, s, y):
        return self.dalpha_dy(s, y)


# Crank-Nicolson backend

class SurvivalField:
    """
    Tables of alpha^t, d alpha / dy and d ln alpha / dy on an (s, z) grid.

    Row i holds the values at s[i] for y = z + shift[i], shift = g(s) - g(0);
    the last grid point of every row sits on the barrier.
    """

    backend = "pde"

    def __init__(self, barrier, horizon, s, z, alpha, dalpha, y_min):
        self.barrier = barrier
        self.horizon = float(horizon)
        self.s = s
        self.z = z
        self.level = float(barrier(0.0))
        self.shift = np.asarray(barrier(s), dtype=float) - self.level
        self.alpha_table = alpha
        self.dalpha_table = dalpha
        self.dlog_table = dalpha / np.maximum(alpha, EPS_ALPHA)
        self.y_min = y_min
        for table in (alpha, dalpha, self.dlog_table):
            table.flags.writeable = False
        self._interp = {
            name: RegularGridInterpolator((s, z), table, method="linear", bounds_error=False, fill_value=None)
            for name, table in (("alpha", alpha), ("dalpha", dalpha), ("dlog", self.dlog_table))
        }

    def y_grid(self, i):
        return self.z + self.shift[i]

    def _lookup(self, name, s, y):
        s, y = np.broadcast_arrays(np.asarray(s, dtype=float), np.asarray(y, dtype=float))
        s = np.clip(s, 0.0, self.horizon)
        zq = y - (np.asarray(self.barrier(s), dtype=float) - self.level)
        above = zq >= self.level
        zq = np.clip(zq, self.z[0], self.z[-1])
        out = self._interp[name](np.stack([s, zq], axis=-1))
        if name == "alpha":
            out = np.where(above, 0.0, out)
        return out if out.ndim else float(out)

    def alpha(self, s, y):
        return self._lookup("alpha", s, y)

    def dalpha_dy(self, s, y):
        return self._lookup("dalpha", s, y)

    def dlog_alpha_dy(self, s, y):
        return self._lookup("dlog", s, y)

    def write_csv(self, path):
        """Export s, y, alpha, dalpha_dy, dlogalpha_dy rows."""
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["s", "y", "alpha", "dalpha_dy", "dlogalpha_dy"])
            for i, s in enumerate(self.s):
                for y, a, da, dl in zip(self.y_grid(i), self.alpha_table[i], self.dalpha_table[i], self.dlog_table[i]):
                    writer.writerow([f"{s:.10g}", f"{y:.10g}", f"{a:.10g}", f"{da:.10g}", f"{dl:.10g}"])


def _linear_tail(barrier, t, length):
    """True when g is a straight line on [t - length, t]."""
    r = np.linspace(t - length, t, 65)
    g = np.asarray(barrier(r), dtype=float)
    chord = g[0] + (g[-1] - g[0]) * (r - r[0]) / length
    return bool(np.max(np.abs(g - chord)) <= 1e-12 * (1.0 + np.max(np.abs(g))))


def _monotone_gradient(table, dz):
    """d alpha / dz with the sign survival requires; positive slopes are cut to 0."""
    gradient = np.gradient(table, dz, axis=1, edge_order=2)
    rising = gradient > MONOTONE_SLACK
    if np.any(rising):
        logger.warning("survival table increases in y at %d points (largest slope %.3g); slopes set to 0",
                       int(rising.sum()), float(gradient.max()))
    return np.minimum(gradient, 0.0)


def alpha_pde(barrier, t, n_s=400, n_y=400, y_min=None, rannacher=2, max_ratio=50.0, terminal_layer=None):
    """
    Tabulate alpha^t by Crank-Nicolson in the straightened coordinate.

    Args:
        barrier: Barrier (piecewise barriers use the a.e. slope of the interpolant)
        t: horizon
        n_s, n_y: number of time and space steps
        y_min: artificial lower boundary (homogeneous Neumann); default
            min g - 6 sqrt(t)
        rannacher: implicit Euler start steps damping the terminal discontinuity
        max_ratio: largest allowed ds / dz^2
        terminal_layer: length of the strip [t - length, t] filled from the
            line formula; only valid where g is linear. Default
            TERMINAL_LAYER * t when g is linear there, else 0

    Returns:
        SurvivalField
    """
    level = float(barrier(0.0))
    lowest = barrier.minimum(t)
    if y_min is None:
        y_min = lowest - DEPTH * np.sqrt(t)
    if y_min >= lowest - MIN_DEPTH * np.sqrt(t):
        raise DomainError(
            f"y_min={y_min} must lie below min g - {MIN_DEPTH} sqrt(t) = {lowest - MIN_DEPTH * np.sqrt(t)}"
        )

    s = np.linspace(0.0, t, n_s + 1)
    shift = np.asarray(barrier(s), dtype=float) - level
    z = np.linspace(y_min - shift.max(), level, n_y + 1)
    ds = t / n_s
    dz = z[1] - z[0]
    if ds > max_ratio * dz**2:
        raise GridTooCoarse(f"ds={ds:.3g} exceeds {max_ratio} dz^2 = {max_ratio * dz**2:.3g}")

    if terminal_layer is None:
        terminal_layer = TERMINAL_LAYER * t if _linear_tail(barrier, t, TERMINAL_LAYER * t) else 0.0
    elif terminal_layer > 0 and not _linear_tail(barrier, t, terminal_layer):
        raise UnsupportedBarrier(f"{barrier.kind} barrier is not linear on [{t - terminal_layer}, {t}]")

    table = np.empty((n_s + 1, n_y + 1))
    start = n_s
    if terminal_layer > 0:
        start = int(np.searchsorted(s, t - terminal_layer - 1e-12 * t))
        rate = (float(barrier(t)) - float(barrier(s[start]))) / (t - s[start]) if start < n_s else 0.0
        for i in range(start, n_s + 1):
            table[i] = _line_formula(float(barrier(s[i])), rate, s[i], z + shift[i], t, derivative=False)
    else:
        table[-1] = 1.0
        table[-1, -1] = 0.0
    if start < n_s:
        # the strip's first row is smooth; no damping steps needed
        rannacher = 0
    solver = BackwardSolver(z, upper="dirichlet", upper_value=0.0)
    table[:start + 1] = solver.solve(table[start], s[:start + 1], drift=lambda r: -float(barrier.slope(r)),
                                     rannacher=rannacher)
    table = np.clip(table, 0.0, 1.0)
    dalpha = _monotone_gradient(table, dz)
    logger.info("alpha_pde: %s barrier, t=%g, grid %dx%d, terminal strip %d rows, alpha(0,0)~%.6f",
                barrier.kind, t, n_s, n_y, n_s - start, float(np.interp(0.0, z, table[0])))
    return SurvivalField(barrier, t, s, z, table, dalpha, y_min)


def survival_model(barrier, t, backend="auto", **pde_options):
    """
    Survival model for horizon t.

    Args:
        barrier: Barrier
        t: horizon
        backend: "auto" (closed form when available, else PDE), "closed_form" or "pde"
        **pde_options: forwarded to alpha_pde

    Returns:
        object with alpha, dalpha_dy, dlog_alpha_dy, barrier, horizon, y_min
    """
    if backend == "auto":
        backend = "closed_form" if isinstance(barrier, (ConstantBarrier, LinearBarrier)) else "pde"
    if backend == "closed_form":
        return ClosedFormSurvival(barrier, t)
    if backend == "pde":
        return alpha_pde(barrier, t, **pde_options)
    raise ValueError(f"unknown survival backend {backend!r}")


# First-passage representation

def line_first_passage_cdf(distance, c, u):
    """P(first passage of w_u + c u through `distance` happens by time u)."""
    if u <= 0:
        return 0.0
    sq = np.sqrt(u)
    return float(ndtr((c * u - distance) / sq) + np.exp(2.0 * c * distance + log_ndtr((-c * u - distance) / sq)))


def alpha_fpt_integral(barrier, s, y, t, z, c, survival=None, tolerance=1e-5, tail_mass=1e-10):
    """
    Survival probability through the first passage to the line u -> z - c u.

        alpha(s, y) = int_0^inf beta(s + u) (z - y) / sqrt(2 pi u^3) exp(-(z - y - c u)^2 / 2u) du,

    with beta(r) = alpha^t(r, z - c (r - s)) for r <= t and 1 beyond t. The part
    r > t is added exactly from the first-passage distribution.

    Args:
        barrier: Barrier
        s, y: starting point, y < z
        t: horizon
        z, c: line parameters; z - c (r - s) < g(r) on [s, t]
        survival: model used for beta (default survival_model(barrier, t))
        tolerance: bound on quadrature error plus truncated tail
        tail_mass: inverse-Gaussian tail mass left out when c > 0

    Returns:
        dict with keys alpha, abserr, tail_bound, u_max
    """
    if not y < z:
        raise DomainError(f"start y={y} must lie below the line start z={z}")
    T = t - s
    r = np.linspace(s, t, 1025)
    if np.any(z - c * (r - s) >= barrier(r)):
        raise LineNotBelowBarrier(f"line {z} - {c} (r - s) reaches the barrier on [{s}, {t}]")
    if survival is None:
        survival = survival_model(barrier, t)

    distance = z - y
    beyond = 1.0 - line_first_passage_cdf(distance, c, T)
    u_max = T
    tail_bound = 0.0
    if c > 0:
        shape = distance**2
        u_tail = float(invgauss.isf(tail_mass, (distance / c) / shape, scale=shape))
        if u_tail < T:
            u_max = u_tail
            tail_bound = 1.0 - line_first_passage_cdf(distance, c, u_max)
            beyond = 0.0

    def integrand(u):
        density = distance / (_SQRT_2PI * u**1.5) * np.exp(-((distance - c * u) ** 2) / (2.0 * u))
        return float(survival.alpha(s + u, z - c * u)) * density

    peak = min(distance**2 / 3.0, 0.5 * u_max)
    value, abserr = integrate.quad(integrand, 0.0, u_max, points=[peak], epsabs=tolerance / 10, limit=200)
    if abserr + tail_bound > tolerance:
        raise QuadratureNotConverged(f"error estimate {abserr:.2e} + tail {tail_bound:.2e} > {tolerance:.2e}")
    return {"alpha": value + beyond, "abserr": abserr, "tail_bound": tail_bound, "u_max": u_max}


def dlog_alpha_dy(field, s, y, floor=EPS_ALPHA):
    """
    Drift kernel d ln alpha / dy at one point.

    Raises:
        NearBarrier: alpha(s, y) <= floor; the caller decides between
            clamping and rejecting
    """
    if float(field.alpha(s, y)) <= floor:
        raise NearBarrier(f"alpha({s}, {y}) <= {floor}")
    return float(field.dlog_alpha_dy(s, y))


def monotone_limit_check(barriers, limit, points, t, backend="auto", tolerance=1e-6, **pde_options):
    """
    Follow alpha and d alpha / dy along barriers increasing to `limit`.

    Args:
        barriers: sequence g_1 <= g_2 <= ... <= limit
        limit: the limit barrier
        points: sequence of (s, y) points
        t: horizon
        backend: survival backend for every barrier
        tolerance: slack allowed when checking that alpha_k is nondecreasing

    Returns:
        dict with a "points" list (alpha, dalpha_dy and distances to the limit
        per barrier) and an overall "monotone" flag
    """
    times = np.linspace(0.0, t, 513)
    sequence = list(barriers) + [limit]
    for k, (lower, upper) in enumerate(zip(sequence[:-1], sequence[1:])):
        if np.any(lower(times) > upper(times) + 1e-12):
            raise NotMonotone(f"barrier {k} exceeds barrier {k + 1}")

    models = [survival_model(b, t, backend, **pde_options) for b in barriers]
    limit_model = survival_model(limit, t, backend, **pde_options)
    report = []
    for s, y in points:
        alphas = np.array([float(m.alpha(s, y)) for m in models])
        dalphas = np.array([float(m.dalpha_dy(s, y)) for m in models])
        a_lim = float(limit_model.alpha(s, y))
        da_lim = float(limit_model.dalpha_dy(s, y))
        report.append({
            "s": s,
            "y": y,
            "alpha": alphas.tolist(),
            "dalpha_dy": dalphas.tolist(),
            "limit_alpha": a_lim,
            "limit_dalpha_dy": da_lim,
            "alpha_distance": np.abs(alphas - a_lim).tolist(),
            "dalpha_distance": np.abs(dalphas - da_lim).tolist(),
            "monotone": bool(np.all(np.diff(alphas) >= -tolerance)),
        })
    return {"points": report, "monotone": all(p["monotone"] for p in report)}
