"""
Krylov-Veretennikov expansion of f(xi_t) for the diffusion dxi = b(s, xi) ds + dw.

    f(xi_t) = sum_n int_{s_1 < ... < s_n} (T_{0,s_1} d T_{s_1,s_2} d ... d T_{s_n,t} f)(0) dw_{s_1} ... dw_{s_n}

with T the transition semigroup of xi and d = d/dy. The kernels are
deterministic; they are tabulated on a lattice of times by propagating the
evaluation functional at y = 0 forward with the adjoint of the backward
Crank-Nicolson steps, and integrated against lattice increments of w.
"""

import logging
import math

import numpy as np
from scipy import sparse

from .barrier import DEPTH, FlatSurvival
from .chaos import GridKernel, constant_kernel, simplex_sum
from .errors import InvalidGrid, OrderTooHigh
from .expansion import FieldFamily, KernelFamily, nu_integrals
from .girsanov import DriftField, sample_conditioned_ensemble
from .montecarlo import brownian_sampler, collect, flag_result, from_samples, product_test, z_result
from .paths import TimeGrid, batch_first_passage, brownian_increments, stop_values
from .pde import BackwardSolver

logger = logging.getLogger(__name__)

MAX_KV_ORDER = 3
# Half width of the domain when there is no barrier.
HALF_WIDTH = 8.0


# Test functions

def _constant(y, value=1.0):
    return np.full(np.shape(y), float(value))


def _linear(y, slope=1.0, intercept=0.0):
    return slope * np.asarray(y, dtype=float) + intercept


def _square(y):
    return np.asarray(y, dtype=float) ** 2


def _sigmoid(y, center=0.0, scale=0.5):
    return 1.0 / (1.0 + np.exp(-(np.asarray(y, dtype=float) - center) / scale))


def _bump(y, center=0.0, width=0.5):
    return np.exp(-0.5 * ((np.asarray(y, dtype=float) - center) / width) ** 2)


FUNCTIONS = {
    "constant": _constant,
    "linear": _linear,
    "square": _square,
    "sigmoid": _sigmoid,
    "bump": _bump,
}


def kv_function(name, **params):
    """Named test function y -> f(y) with bound parameters."""
    if name not in FUNCTIONS:
        raise ValueError(f"unknown test function {name!r}, expected one of {sorted(FUNCTIONS)}")
    func = FUNCTIONS[name]

    def f(y):
        return func(y, **params)

    f.__name__ = name
    return f


def function_from_dict(spec):
    spec = dict(spec)
    return kv_function(spec.pop("name"), **spec)


def derivative_matrix(n, dz):
    """Centered first difference, second-order one-sided at both ends (np.gradient edge_order=2)."""
    inner = np.arange(1, n - 1)
    rows = np.concatenate([inner, inner, [0, 0, 0, n - 1, n - 1, n - 1]])
    cols = np.concatenate([inner - 1, inner + 1, [0, 1, 2, n - 1, n - 2, n - 3]])
    data = np.concatenate([
        np.full(inner.size, -0.5), np.full(inner.size, 0.5), [-1.5, 2.0, -0.5, 1.5, -2.0, 0.5],
    ]) / dz
    return sparse.csr_matrix((data, (rows, cols)), shape=(n, n))


class Semigroup:
    """
    Transition semigroup T_{s,t} of dxi = b ds + dw on [0, horizon].

    With a barrier the problem is solved in the straightened coordinate
    z = y - (g(s) - g(0)) with an absorbing (zero) condition on the barrier;
    without one on [-8, 8] with homogeneous Neumann ends.

    Args:
        horizon: t
        field: DriftField giving b, or None for b = 0
        n_y: space steps
        n_lattice: lattice cells of [0, t] on which KV kernels are tabulated
        substeps: Crank-Nicolson steps per lattice cell
    """

    def __init__(self, horizon, field=None, n_y=400, n_lattice=32, substeps=4):
        self.horizon = float(horizon)
        self.field = field
        self.n_lattice = int(n_lattice)
        self.substeps = int(substeps)
        self.times = np.linspace(0.0, self.horizon, self.n_lattice * self.substeps + 1)
        self.barrier = None if field is None else field.barrier
        if self.barrier is None:
            self.level = 0.0
            self.shift = np.zeros_like(self.times)
            z = np.linspace(-HALF_WIDTH, HALF_WIDTH, n_y + 1)
            self.solver = BackwardSolver(z, upper="neumann")
        else:
            self.level = float(self.barrier(0.0))
            self.shift = np.asarray(self.barrier(self.times), dtype=float) - self.level
            y_min = getattr(field, "y_min", None)
            if y_min is None:
                y_min = self.barrier.minimum(self.horizon) - DEPTH * np.sqrt(self.horizon)
            z = np.linspace(y_min - self.shift.max(), self.level, n_y + 1)
            self.solver = BackwardSolver(z, upper="dirichlet", upper_value=0.0)
        self.z = self.solver.z
        self.D = derivative_matrix(self.z.size, self.solver.dz)
        self._steps = None
        self._kernels = {}

    @property
    def lattice(self):
        return TimeGrid(self.horizon, self.n_lattice)

    def _drift(self, s):
        if self.field is None:
            return 0.0
        if self.barrier is None:
            return np.asarray(self.field.drift(s, self.z), dtype=float)
        y = self.z + (float(self.barrier(s)) - self.level)
        return np.asarray(self.field.drift(s, y), dtype=float) - float(self.barrier.slope(s))

    @property
    def steps(self):
        """(lu, B, b) of every fine backward step from times[k+1] to times[k]."""
        if self._steps is None:
            self._steps = []
            for k in range(self.times.size - 1):
                ds = self.times[k + 1] - self.times[k]
                self._steps.append(self.solver.step_operators(self._drift(self.times[k] + 0.5 * ds), ds, 0.5))
        return self._steps

    def y_grid(self, k):
        """y values of the grid at fine time index k."""
        return self.z + self.shift[k]

    def sample(self, f, k):
        return np.asarray(f(self.y_grid(k)), dtype=float)

    def index(self, s):
        k = int(round(s / self.times[1]))
        if not (0 <= k < self.times.size) or not math.isclose(self.times[k], s, rel_tol=1e-9, abs_tol=1e-12):
            raise InvalidGrid(f"time {s} is not a node of the semigroup grid")
        return k

    def backward(self, u, k_to, k_from):
        """Values at times[k_to] of T applied to grid values u at times[k_from]."""
        for k in range(k_from - 1, k_to - 1, -1):
            lu, B, b = self.steps[k]
            u = lu.solve(B @ u + b)
        return u

    def forward(self, rows, k_from, k_to):
        """Adjoint propagation of functionals (columns of `rows`) from times[k_from] to times[k_to]."""
        for k in range(k_from, k_to):
            lu, B, _ = self.steps[k]
            rows = B.T @ lu.solve(rows, trans="T")
        return rows

    def evaluation(self, y=0.0):
        """Weights of linear interpolation at y on the grid of time 0."""
        z = self.z
        j = int(np.clip(np.searchsorted(z, y) - 1, 0, z.size - 2))
        frac = (y - z[j]) / (z[j + 1] - z[j])
        weights = np.zeros(z.size)
        weights[j] = 1.0 - frac
        weights[j + 1] = frac
        return weights

    def kernels(self, f, max_order=MAX_KV_ORDER):
        """
        KV kernels of f on the lattice, orders 0..max_order.

        Returns:
            list whose entry n is an array of shape (n_lattice,)*n holding
            (T_{0,s_1} d ... d T_{s_n,t} f)(0) at lattice left points for
            s_1 < ... < s_n (strict), zero elsewhere
        """
        if max_order > MAX_KV_ORDER:
            raise OrderTooHigh(f"KV terms support orders <= {MAX_KV_ORDER}")
        cached = self._kernels.get(id(f))
        if cached is not None and cached[0] is f and len(cached[1]) > max_order:
            return cached[1]
        L, m = self.n_lattice, self.substeps
        u = self.sample(f, self.times.size - 1)
        du = [None] * L
        for j in range(L - 1, -1, -1):
            u = self.backward(u, j * m, (j + 1) * m)
            du[j] = self.D @ u
        p0 = self.evaluation()[:, None]
        kernels = [float(p0[:, 0] @ u)]
        kernels += [np.zeros((L,) * n) for n in range(1, max_order + 1)]
        rows = {0: p0}
        prefixes = {0: [()]}
        for n in range(1, max_order):
            rows[n] = np.zeros((self.z.size, 0))
            prefixes[n] = []
        for j in range(L):
            for n in range(max_order, 0, -1):
                values = rows[n - 1].T @ du[j]
                for prefix, value in zip(prefixes[n - 1], values):
                    kernels[n][prefix + (j,)] = value
                if n < max_order:
                    rows[n] = np.hstack([rows[n], self.D.T @ rows[n - 1]])
                    prefixes[n] = prefixes[n] + [prefix + (j,) for prefix in prefixes[n - 1]]
            if j < L - 1:
                for n in rows:
                    if rows[n].shape[1]:
                        rows[n] = self.forward(rows[n], j * m, (j + 1) * m)
        self._kernels[id(f)] = (f, kernels)
        logger.info("KV kernels up to order %d on a %d-cell lattice", max_order, L)
        return kernels


def semigroup_apply(sg, s, t, f):
    """
    T_{s,t} f for grid values f at time t.

    Returns:
        grid values at time s (f itself when s = t)
    """
    if s > t:
        raise ValueError(f"need s <= t, got s={s}, t={t}")
    return sg.backward(np.asarray(f, dtype=float), sg.index(s), sg.index(t))


def kv_kernel(n, f, sg):
    """The symmetric order-n kernel of the KV term on the lattice (scalar kernel for n = 0)."""
    kernels = sg.kernels(f, max(n, 1))
    if n == 0:
        return constant_kernel(kernels[0], 0, sg.horizon)
    return GridKernel(sg.lattice, kernels[n])


def kv_terms(n, f, grid, increments, sg):
    """Order-n KV terms for rows of Brownian increments on `grid`."""
    if n > MAX_KV_ORDER:
        raise OrderTooHigh(f"KV terms support orders <= {MAX_KV_ORDER}")
    increments = np.atleast_2d(increments)
    if n == 0:
        return np.full(increments.shape[0], sg.kernels(f, 1)[0])
    if grid.n_steps % sg.n_lattice or not math.isclose(grid.horizon, sg.horizon, rel_tol=1e-9):
        raise InvalidGrid(f"path grid of {grid.n_steps} steps does not refine the {sg.n_lattice}-cell lattice")
    coarse = increments.reshape(increments.shape[0], sg.n_lattice, -1).sum(axis=2)
    return simplex_sum(sg.kernels(f, max(n, 1))[n], coarse)


def kv_term(n, f, path, sg):
    """
    Order-n KV term along the driving Brownian path.

    Args:
        n: order 0..3
        f: test function y -> f(y)
        path: Path of the driving Brownian motion w on [0, t]
        sg: Semigroup

    Returns:
        float
    """
    return float(kv_terms(n, f, path.grid, path.increments[None, :], sg)[0])


def _sampler(field, grid):
    def sampler(seed, start, count):
        return sample_conditioned_ensemble(field, grid, count, seed, "h_transform", start)

    return sampler


def kv_truncation_study(f, max_order, n_paths, sg, grid, seed, workers=1, threshold=3.0, separation=5.0):
    """
    Residuals E[(f(xi_t) - sum_{n <= N} KV_n)^2] for N = 0..max_order.

    xi is the Euler scheme of the semigroup's diffusion driven by the Brownian
    stream of each path index; the KV terms use the same Brownian increments.

    Returns:
        report dict with tests and rows (order, residual, stderr, energy)
    """
    if max_order > MAX_KV_ORDER:
        raise OrderTooHigh(f"KV terms support orders <= {MAX_KV_ORDER}")
    field = sg.field if sg.field is not None else DriftField(FlatSurvival(sg.horizon))
    kernels = sg.kernels(f, max(max_order, 1))

    def evaluate(batch):
        increments = np.stack([brownian_increments(grid, seed, i) for i in batch.indices])
        out = {"f": np.asarray(f(batch.values[:, -1]), dtype=float)}
        for n in range(max_order + 1):
            out[f"kv{n}"] = kv_terms(n, f, grid, increments, sg)
        return out

    values = collect(evaluate, _sampler(field, grid), n_paths, seed, workers)
    rows, estimates = [], []
    partial = np.zeros(n_paths)
    dt = sg.horizon / sg.n_lattice
    for n in range(max_order + 1):
        partial = partial + values[f"kv{n}"]
        est = from_samples((values["f"] - partial) ** 2)
        energy = kernels[0] ** 2 if n == 0 else float(np.sum(kernels[n] ** 2) * dt**n)
        rows.append({"order": n, "residual": est.mean, "stderr": est.stderr, "energy": energy})
        estimates.append(est)

    tests = []
    scale = max(rows[0]["residual"], 1e-12)
    active = {row["order"] for row in rows[1:] if row["energy"] > 1e-6 * scale}
    for prev, cur, row in zip(estimates[:-1], estimates[1:], rows[1:]):
        if row["order"] not in active:
            continue
        gap = prev.mean - cur.mean
        tests.append(flag_result(f"kv_decrease[{row['order']}]",
                                 gap > separation * math.hypot(prev.stderr, cur.stderr), gap))
    orders = list(range(1, max_order + 1))
    for i, a in enumerate(orders):
        for b in orders[i + 1:]:
            if a in active and b in active:
                tests.append(product_test(values[f"kv{a}"], values[f"kv{b}"], threshold, f"kv_orthogonal[{a},{b}]"))
    return {
        "rows": rows,
        "f_mean": from_samples(values["f"]).to_dict(),
        "k0": float(kernels[0]),
        "tests": tests,
        "all_pass": all(t["pass"] for t in tests),
    }


def kv_bridge_check(f, barrier, grid, n_paths, seed, n_horizons=16, workers=1, threshold=3.0, **semigroup_options):
    """
    Insert the order-1 KV kernels of f as the slices of an order-2 stopped-flow family.

    For every horizon t_k the order-1 KV kernel of f under the drift of
    alpha^{t_k} is the first compensated-chaos kernel of f(x_{t_k}) under the
    conditioned law. With Psi = 2 int_0^tau (f(x_t) - E f(xi_t)) deta_t,
    E[Psi I^nu_2] must equal E[(I^nu_2)^2].

    Returns:
        report dict with the projection test and both estimates
    """
    fields = FieldFamily.from_barrier(barrier, grid, n_horizons)
    slices, centers = {}, {}
    for t, field in zip(fields.horizons, fields.fields):
        sg = Semigroup(t, field, **semigroup_options)
        slices[t] = kv_kernel(1, f, sg)
        centers[t] = sg.kernels(f, 1)[0]
    family = KernelFamily.from_slices(slices)
    knot_steps = np.concatenate([[0], fields.steps])
    center = np.array([0.0] + [centers[t] for t in fields.horizons])

    def evaluate(batch):
        hits = batch_first_passage(batch, barrier, "bridge")
        eta = stop_values(batch.values, hits)
        deta = np.diff(eta, axis=1)
        kidx = np.searchsorted(knot_steps, np.arange(grid.n_steps), side="right") - 1
        frozen = batch.values[:, knot_steps[kidx]]
        integrand = np.where(kidx > 0, np.asarray(f(frozen), dtype=float) - center[kidx], 0.0)
        return {"psi": 2.0 * np.sum(integrand * deta, axis=1), "nu": nu_integrals(family, batch, hits, fields)}

    values = collect(evaluate, brownian_sampler(grid), n_paths, seed, workers)
    cross = from_samples(values["psi"] * values["nu"])
    norm = from_samples(values["nu"] ** 2)
    diff = from_samples(values["psi"] * values["nu"] - values["nu"] ** 2)
    tests = [z_result("kv_bridge_projection", diff.mean, diff.stderr, 0.0, threshold)]
    return {
        "projection": cross.to_dict(),
        "norm": norm.to_dict(),
        "tests": tests,
        "all_pass": all(t["pass"] for t in tests),
    }
