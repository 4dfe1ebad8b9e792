"""
Drift fields, the measurable isomorphism T_g and barrier-conditioned sampling.

Under the law kappa of Brownian motion conditioned to stay below g up to t,
the path solves dx = d ln alpha^t / dy (s, x) ds + dw. T_g removes that drift
and sends kappa back to the Wiener measure.
"""

import logging
import math

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .barrier import EPS_ALPHA
from .errors import HorizonMismatch, NearBarrier, PathTouchesBarrier, RejectionBudgetExceeded
from .paths import (
    REJECTION_STREAM,
    HittingBatch,
    Path,
    PathBatch,
    brownian_increments,
    first_passage,
    hitting_time,
    stream,
    _values_from_increments,
)

logger = logging.getLogger(__name__)

POLICIES = ("clamp", "reject")
METHODS = ("h_transform", "rejection")
# Candidates drawn per generator in the rejection sampler.
REJECTION_BLOCK = 16


class DriftField:
    """
    The drift d ln alpha^t / dy of a survival model, with a near-barrier policy.

    Args:
        model: survival model (ClosedFormSurvival, SurvivalField or FlatSurvival)
        policy: "clamp" cuts the drift to [-max_abs, max_abs] and uses -max_abs
            where alpha <= floor; "reject" raises NearBarrier there
        max_abs: clamp level
        floor: survival probability below which the drift is not trusted
    """

    def __init__(self, model, policy="clamp", max_abs=1e3, floor=EPS_ALPHA):
        if policy not in POLICIES:
            raise ValueError(f"unknown near-barrier policy {policy!r}, expected one of {POLICIES}")
        self.model = model
        self.policy = policy
        self.max_abs = float(max_abs)
        self.floor = float(floor)

    @property
    def horizon(self):
        return self.model.horizon

    @property
    def barrier(self):
        return self.model.barrier

    @property
    def y_min(self):
        return self.model.y_min

    def alpha(self, s, y):
        return self.model.alpha(s, y)

    def dalpha_dy(self, s, y):
        return self.model.dalpha_dy(s, y)

    def drift(self, s, y):
        """Vectorized drift at (s, y)."""
        if self.barrier is None:
            return self.model.dlog_alpha_dy(s, y)
        alpha = np.asarray(self.model.alpha(s, y), dtype=float)
        near = alpha <= self.floor
        if np.any(near):
            if self.policy == "reject":
                raise NearBarrier(f"{int(np.sum(near))} drift evaluations with alpha <= {self.floor}")
            logger.debug("clamping drift at %d points near the barrier", int(np.sum(near)))
        value = np.clip(np.asarray(self.model.dlog_alpha_dy(s, y), dtype=float), -self.max_abs, self.max_abs)
        value = np.where(near, -self.max_abs, value)
        return value if value.ndim else float(value)


def _check_below(values, grid, barrier):
    if barrier is None:
        return
    if np.any(np.atleast_2d(values) >= np.asarray(barrier(grid.times))[None, :]):
        raise PathTouchesBarrier("path reaches the barrier")


def _check_horizon(grid, field):
    if grid.horizon > field.horizon * (1 + 1e-9):
        raise HorizonMismatch(f"path horizon {grid.horizon} exceeds field horizon {field.horizon}")


def drift_along(values, grid, field):
    """Drift evaluated at every grid point of every row, shape of `values`."""
    values = np.atleast_2d(values)
    return np.asarray(field.drift(np.broadcast_to(grid.times, values.shape), values), dtype=float)


def _transform_values(values, grid, field):
    _check_horizon(grid, field)
    _check_below(values, grid, field.barrier)
    drift = drift_along(values, grid, field)
    return np.atleast_2d(values) - cumulative_trapezoid(drift, grid.times, axis=1, initial=0.0)


def transform_Tg(path, field):
    """
    T_g(x)(t) = x(t) - int_0^t d ln alpha / dy (s, x(s)) ds.

    The integral is the cumulative trapezoid rule on the path grid.

    Raises:
        PathTouchesBarrier: the path reaches the barrier
    """
    return Path(path.grid, _transform_values(path.values, path.grid, field)[0])


def transform_ensemble(batch, field):
    """transform_Tg for every path of a PathBatch."""
    return PathBatch(batch.grid, _transform_values(batch.values, batch.grid, field), batch.seed, batch.start)


def _euler(increments, grid, field):
    """Euler-Maruyama for dx = drift ds + dw; overshoots are reflected below the barrier."""
    n_paths = increments.shape[0]
    times = grid.times
    values = np.zeros((n_paths, grid.n_steps + 1))
    gvals = None if field.barrier is None else np.asarray(field.barrier(times), dtype=float)
    reflected = 0
    x = values[:, 0]
    for i in range(grid.n_steps):
        x = x + np.asarray(field.drift(times[i], x)) * grid.dt + increments[:, i]
        if gvals is not None:
            over = x >= gvals[i + 1]
            if np.any(over):
                reflected += int(np.sum(over))
                x = np.where(over, 2.0 * gvals[i + 1] - x, x)
                x = np.minimum(x, np.nextafter(gvals[i + 1], -np.inf))
        values[:, i + 1] = x
    if reflected:
        logger.info("h-transform Euler: %d overshoots reflected below the barrier", reflected)
    return values


def _rejection_one(grid, barrier, seed, index, max_attempts):
    """First surviving candidate of path `index` and the number of candidates drawn."""
    attempts = 0
    block = 0
    while attempts < max_attempts:
        rng = stream(seed, REJECTION_STREAM, index, block)
        size = min(REJECTION_BLOCK, max_attempts - attempts)
        increments = rng.standard_normal((size, grid.n_steps)) * np.sqrt(grid.dt)
        uniforms = rng.random((size, grid.n_steps))
        values = _values_from_increments(increments)
        if barrier is None:
            return values[0], attempts + 1
        hits = first_passage(values, grid, barrier, "bridge", uniforms)
        alive = np.flatnonzero(~hits.hit)
        if alive.size:
            return values[alive[0]], attempts + int(alive[0]) + 1
        attempts += size
        block += 1
    raise RejectionBudgetExceeded(f"no surviving path for index {index} after {max_attempts} attempts")


def sample_conditioned_ensemble(field, grid, n_paths, seed, method="h_transform", start=0,
                                max_attempts=100000, return_attempts=False):
    """
    Sample paths start .. start+n_paths-1 of the law conditioned to survive below g.

    Args:
        field: DriftField whose horizon equals the grid horizon
        grid: TimeGrid
        n_paths: number of paths
        seed: experiment seed
        method: "h_transform" (Euler scheme driven by the Brownian stream of
            each index) or "rejection" (bridge-corrected survivors)
        start: index of the first path
        max_attempts: rejection budget per path
        return_attempts: also return the candidates drawn per path (rejection)

    Returns:
        PathBatch, or (PathBatch, attempts array) when return_attempts is set
    """
    if method not in METHODS:
        raise ValueError(f"unknown sampling method {method!r}, expected one of {METHODS}")
    if not math.isclose(grid.horizon, field.horizon, rel_tol=1e-9):
        raise HorizonMismatch(f"grid horizon {grid.horizon} vs field horizon {field.horizon}")
    attempts = np.ones(n_paths, dtype=int)
    if method == "h_transform":
        increments = np.stack([brownian_increments(grid, seed, start + k) for k in range(n_paths)])
        values = _euler(increments, grid, field)
    else:
        values = np.empty((n_paths, grid.n_steps + 1))
        for k in range(n_paths):
            values[k], attempts[k] = _rejection_one(grid, field.barrier, seed, start + k, max_attempts)
    batch = PathBatch(grid, values, seed, start)
    if return_attempts:
        return batch, attempts
    return batch


def sample_conditioned(field, grid, seed, method="h_transform", index=0, max_attempts=100000):
    """One conditioned path; identical to row `index` of sample_conditioned_ensemble."""
    batch = sample_conditioned_ensemble(field, grid, 1, seed, method, index, max_attempts)
    return batch.path(0)


def acceptance_rate(attempts):
    """
    Acceptance rate of the rejection sampler from the candidates drawn per path.

    Returns:
        (rate, stderr) with the geometric-distribution standard error
    """
    attempts = np.asarray(attempts)
    rate = attempts.size / attempts.sum()
    return float(rate), float(rate * np.sqrt((1.0 - rate) / attempts.size))


def clark_integrands(values, grid, field, hits):
    """
    Row-wise Clark integrand d alpha / dy (s, x(s)) 1{s <= tau} on the grid.

    Grid points after the crossing step are zero.
    """
    values = np.atleast_2d(values)
    dalpha = np.asarray(field.dalpha_dy(np.broadcast_to(grid.times, values.shape), values), dtype=float)
    columns = np.arange(values.shape[1])[None, :]
    alive = ~hits.hit[:, None] | (columns <= hits.crossing_index[:, None])
    return np.where(alive, dalpha, 0.0)


def clark_integrand(path, field, hit=None):
    """
    Integrand h(s) of the Clark representation
    1{tau = t} = alpha(0, 0) + int_0^t h(s) dw_s.

    Args:
        path: unconditioned Path
        field: DriftField (or survival model) of the path horizon
        hit: HittingResult of the path; interpolated first passage when omitted

    Returns:
        numpy array of n_steps+1 values, zero after the hit
    """
    _check_horizon(path.grid, field)
    if hit is None:
        hit = hitting_time(path, field.barrier)
    hits = _single_batch(hit)
    return clark_integrands(path.values, path.grid, field, hits)[0]


def _single_batch(hit):
    return HittingBatch(
        tau=np.array([hit.tau]),
        hit=np.array([hit.hit]),
        crossing_index=np.array([hit.crossing_index]),
        level=np.array([hit.level]),
    )
