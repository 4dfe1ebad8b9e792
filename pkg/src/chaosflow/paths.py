"""
Time grids, Brownian paths, Ito sums and first-passage detection.

Every path index owns its own random stream derived from (seed, stream kind,
index), so ensembles can be split into chunks and handed to workers without
sharing generator state. The single-path and the batch functions draw from the
same streams and agree exactly.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import BarrierAlreadyHit, InvalidGrid, LengthMismatch

logger = logging.getLogger(__name__)

# Stream kinds, first element of the spawn key.
BROWNIAN_STREAM = 0
BRIDGE_STREAM = 1
REJECTION_STREAM = 2
# Auxiliary draws that are not paths (e.g. Gaussian samples for Hermite checks).
AUX_STREAM = 3

MODES = ("interpolated", "bridge")


def stream(seed, *key):
    """
    Return the random generator for a spawn key.

    Args:
        seed: non-negative integer seed of the experiment
        *key: integers identifying the stream (kind, path index, ...)

    Returns:
        numpy.random.Generator, identical for identical (seed, key)
    """
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < ... < t_n = horizon."""

    horizon: float
    n_steps: int

    def __post_init__(self):
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise InvalidGrid(f"n_steps must be a positive integer, got {self.n_steps}")
        if not (0.0 < self.horizon <= 1.0 + 1e-12):
            raise InvalidGrid(f"horizon must lie in (0, 1], got {self.horizon}")
        object.__setattr__(self, "n_steps", int(self.n_steps))
        object.__setattr__(self, "horizon", float(self.horizon))

    @property
    def dt(self):
        return self.horizon / self.n_steps

    @property
    def times(self):
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    @property
    def midpoints(self):
        return (np.arange(self.n_steps) + 0.5) * self.dt

    def restrict(self, k):
        """Grid of the first k steps, horizon t_k."""
        if not 1 <= k <= self.n_steps:
            raise InvalidGrid(f"cannot restrict {self.n_steps}-step grid to {k} steps")
        return TimeGrid(self.times[k], k)


@dataclass(frozen=True, eq=False)
class Path:
    """A trajectory sampled on a TimeGrid, starting at 0. Values are read-only."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != (self.grid.n_steps + 1,):
            raise LengthMismatch(
                f"path has {values.size} values, grid needs {self.grid.n_steps + 1}"
            )
        if values[0] != 0.0:
            raise ValueError(f"path must start at 0, starts at {values[0]}")
        if not np.all(np.isfinite(values)):
            raise ValueError("path values must be finite")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def increments(self):
        return np.diff(self.values)

    def restrict(self, k):
        """The path on [0, t_k]."""
        return Path(self.grid.restrict(k), self.values[: k + 1])


@dataclass(frozen=True)
class HittingResult:
    """First passage of one path. `level` is the frozen value after tau."""

    tau: float
    hit: bool
    crossing_index: int
    level: float


@dataclass(frozen=True, eq=False)
class PathBatch:
    """Paths with indices start .. start+count-1 of the ensemble drawn with `seed`."""

    grid: TimeGrid
    values: np.ndarray
    seed: int
    start: int = 0

    @property
    def count(self):
        return self.values.shape[0]

    @property
    def indices(self):
        return np.arange(self.start, self.start + self.count)

    @property
    def increments(self):
        return np.diff(self.values, axis=1)

    def path(self, k):
        return Path(self.grid, self.values[k])


@dataclass(frozen=True, eq=False)
class HittingBatch:
    """Vectorized HittingResult."""

    tau: np.ndarray
    hit: np.ndarray
    crossing_index: np.ndarray
    level: np.ndarray

    def result(self, k):
        return HittingResult(
            tau=float(self.tau[k]),
            hit=bool(self.hit[k]),
            crossing_index=int(self.crossing_index[k]),
            level=float(self.level[k]),
        )


def brownian_increments(grid, seed, index):
    return stream(seed, BROWNIAN_STREAM, index).standard_normal(grid.n_steps) * np.sqrt(grid.dt)


def bridge_uniforms(grid, seed, index):
    return stream(seed, BRIDGE_STREAM, index).random(grid.n_steps)


def _values_from_increments(increments):
    increments = np.atleast_2d(increments)
    values = np.zeros((increments.shape[0], increments.shape[1] + 1))
    np.cumsum(increments, axis=1, out=values[:, 1:])
    return values


def sample_brownian(grid, seed, index=0):
    """
    Sample one Brownian path.

    Args:
        grid: TimeGrid
        seed: experiment seed
        index: path index inside the ensemble (selects the stream)

    Returns:
        Path with independent N(0, dt) increments
    """
    return Path(grid, _values_from_increments(brownian_increments(grid, seed, index))[0])


def sample_brownian_ensemble(grid, n_paths, seed, start=0):
    """
    Sample paths start .. start+n_paths-1 of a Brownian ensemble.

    Returns:
        PathBatch whose k-th row equals sample_brownian(grid, seed, start + k)
    """
    increments = np.empty((n_paths, grid.n_steps))
    for k in range(n_paths):
        increments[k] = brownian_increments(grid, seed, start + k)
    return PathBatch(grid, _values_from_increments(increments), seed, start)


def first_passage(values, grid, barrier, mode="interpolated", uniforms=None):
    """
    First passage of an array of paths through a barrier.

    Args:
        values: array (n_paths, n_steps+1) or (n_steps+1,)
        grid: TimeGrid of the paths
        barrier: callable g(t), vectorized
        mode: "interpolated" or "bridge"
        uniforms: array (n_paths, n_steps) of U(0,1) draws, bridge mode only

    Returns:
        HittingBatch. In bridge mode a step whose endpoints stay below the
        barrier is still declared crossed with probability
        exp(-2 d_i d_{i+1} / dt) (barrier linearized inside the step); tau is
        then the step midpoint.
    """
    if mode not in MODES:
        raise ValueError(f"unknown hitting mode {mode!r}, expected one of {MODES}")
    values = np.atleast_2d(np.asarray(values, dtype=float))
    times = grid.times
    gvals = np.asarray(barrier(times), dtype=float)
    distance = gvals[None, :] - values
    if np.any(distance[:, 0] <= 0.0):
        raise BarrierAlreadyHit("barrier(0) must lie strictly above the path start")

    d_left = distance[:, :-1]
    d_right = distance[:, 1:]
    crossed = d_right <= 0.0
    events = crossed
    if mode == "bridge":
        if uniforms is None:
            raise ValueError("bridge mode needs uniforms")
        uniforms = np.atleast_2d(uniforms)
        prob = np.exp(-2.0 * np.clip(d_left, 0.0, None) * np.clip(d_right, 0.0, None) / grid.dt)
        events = crossed | (uniforms < prob)

    hit = events.any(axis=1)
    first = np.where(hit, events.argmax(axis=1), grid.n_steps - 1)
    rows = np.arange(values.shape[0])
    dl = d_left[rows, first]
    dr = d_right[rows, first]
    on_grid = crossed[rows, first]
    denom = np.where(on_grid, dl - dr, 1.0)
    fraction = np.where(on_grid, dl / denom, 0.5)
    tau = np.where(hit, times[first] + fraction * grid.dt, grid.horizon)
    level = np.where(hit, np.interp(tau, times, gvals), values[:, -1])
    return HittingBatch(tau=tau, hit=hit, crossing_index=first, level=level)


def batch_first_passage(batch, barrier, mode="interpolated"):
    """first_passage for a PathBatch, drawing bridge uniforms from the per-index streams."""
    uniforms = None
    if mode == "bridge":
        uniforms = np.stack([bridge_uniforms(batch.grid, batch.seed, i) for i in batch.indices])
    return first_passage(batch.values, batch.grid, barrier, mode, uniforms)


def hitting_time(path, barrier, mode="interpolated", seed=None, index=0):
    """
    First time the path reaches the barrier (horizon if it never does).

    Args:
        path: Path
        barrier: callable g(t), g(0) > 0
        mode: "interpolated" or "bridge"
        seed, index: select the bridge stream (bridge mode only)

    Returns:
        HittingResult
    """
    uniforms = None
    if mode == "bridge":
        if seed is None:
            raise ValueError("bridge mode needs a seed")
        uniforms = bridge_uniforms(path.grid, seed, index)
    return first_passage(path.values, path.grid, barrier, mode, uniforms).result(0)


def stop_values(values, hits):
    """Freeze each row at its level after the crossing step."""
    values = np.atleast_2d(values)
    columns = np.arange(values.shape[1])[None, :]
    frozen = hits.hit[:, None] & (columns > hits.crossing_index[:, None])
    return np.where(frozen, hits.level[:, None], values)


def stop_paths(batch, hits):
    """The stopped paths of a PathBatch."""
    return PathBatch(batch.grid, stop_values(batch.values, hits), batch.seed, batch.start)


def stop_path(path, hr):
    """
    The stopped path x(min(tau, .)).

    Grid values after the crossing step are replaced by the barrier level at
    tau; stopping twice with the same result is the same as stopping once.
    """
    if not hr.hit:
        return path
    values = np.array(path.values)
    values[hr.crossing_index + 1:] = hr.level
    return Path(path.grid, values)


def ito_integral(integrand, path):
    """
    Left-point Ito sum of an adapted integrand against a path.

    Args:
        integrand: sequence of n_steps+1 reals (the last one is unused)
        path: Path

    Returns:
        float, sum_i integrand[i] * (values[i+1] - values[i])
    """
    integrand = np.asarray(integrand, dtype=float)
    if integrand.shape != path.values.shape:
        raise LengthMismatch(
            f"integrand has {integrand.size} values, path has {path.values.size}"
        )
    return float(np.dot(integrand[:-1], path.increments))


def ito_sums(integrands, values):
    """Row-wise ito_integral for arrays of shape (n_paths, n_steps+1)."""
    integrands = np.atleast_2d(integrands)
    values = np.atleast_2d(values)
    if integrands.shape != values.shape:
        raise LengthMismatch(f"integrands {integrands.shape} vs paths {values.shape}")
    return np.sum(integrands[:, :-1] * np.diff(values, axis=1), axis=1)
