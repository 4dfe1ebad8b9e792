"""
Compensated chaos operators under the conditioned law and the stopped-flow expansion.

For a path x conditioned to stay below g up to t, with drift
rho(s) = d ln alpha^t / dy (s, x(s)),

    I^kappa_n a = sum_m (-1)^m C(n, m) int int a(r, s) dx_r prod_i rho(s_i) ds,

which formally equals n! times the iterated integral against dx - rho ds. For a
Brownian path w with first passage tau, the stopped-flow operator is

    I^nu_n a = n int_0^tau I^kappa(t)_{n-1}(a(., t)) dw_t,

evaluated with the inner operator frozen on a grid of horizons (knots).
"""

import logging
import math
from itertools import combinations, permutations
from collections import Counter

import numpy as np
from scipy import integrate
from scipy.special import comb

from .barrier import ConstantBarrier, LinearBarrier, alpha_closed_form, survival_model
from .chaos import (
    MAX_GRID_ORDER,
    GridKernel,
    ProductBasisKernel,
    check_horizon,
    constant_kernel,
    iterated_product,
    kernel_inner,
    simplex_sum,
)
from .errors import HorizonMismatch, InvalidGrid, OrderMismatch, OrderTooHigh, TGridTooCoarse
from .girsanov import DriftField, _check_below, _single_batch, drift_along, transform_ensemble
from .montecarlo import (
    DEFAULT_THRESHOLD,
    brownian_sampler,
    collect,
    conditioned_sampler,
    flag_result,
    from_samples,
    product_test,
    z_result,
)
from .paths import PathBatch, batch_first_passage, stop_values

logger = logging.getLogger(__name__)

MAX_KAPPA_ORDER = 3
DEFAULT_HORIZONS = 64


# Compensated operators

def _sym_integral(samples, dw):
    """I_k of the symmetrized tensor product of sampled factors: sum over orderings."""
    if not samples:
        return np.ones(dw.shape[0])
    keys = list(range(len(samples)))
    total = np.zeros(dw.shape[0])
    for perm in permutations(keys):
        total += iterated_product([samples[i] for i in perm], dw)
    return total


def _kappa_product(kernel, grid, dw, v):
    n = kernel.order
    mids = grid.midpoints
    total = np.zeros(dw.shape[0])
    for coef, factors in kernel.terms:
        samples = [np.broadcast_to(np.asarray(f(mids), dtype=float), mids.shape) for f in factors]
        F = [(v * s).sum(axis=1) for s in samples]
        cache = {}
        for size in range(n + 1):
            for S in combinations(range(n), size):
                rest = [j for j in range(n) if j not in S]
                key = tuple(sorted(Counter(factors[j] for j in rest).items(), key=repr))
                if key not in cache:
                    cache[key] = _sym_integral([samples[j] for j in rest], dw)
                weight = np.prod([F[j] for j in S], axis=0) if S else 1.0
                total += (-1) ** size * coef * weight * cache[key]
    return total


def _kappa_dense(kernel, grid, dw, v):
    n = kernel.order
    cube = kernel.cube(grid)
    out = np.empty(dw.shape[0])
    for p in range(dw.shape[0]):
        contracted = cube
        total = 0.0
        for m in range(n + 1):
            if m:
                contracted = contracted @ v[p]
            k = n - m
            term = math.factorial(k) * simplex_sum(contracted, dw[p:p + 1])[0]
            total += (-1) ** m * comb(n, m, exact=True) * term
        out[p] = total
    return out


def _drift_increments(kernel, grid, values, field):
    if isinstance(kernel, GridKernel) and kernel.order > MAX_KAPPA_ORDER:
        raise OrderTooHigh(f"compensated operators support grid kernels of order <= {MAX_KAPPA_ORDER}")
    check_horizon(kernel, grid)
    _check_below(values, grid, field.barrier)
    dw = np.diff(values, axis=1)
    v = drift_along(values, grid, field)[:, :-1] * grid.dt
    return dw, v


def kappa_integrals(kernel, grid, values, field):
    """
    I^kappa_n of `kernel` along every row of `values` (conditioned paths).

    Product-basis kernels are contracted factor by factor; other kernels use
    their dense cube on the path grid.

    Returns:
        array (n_paths,)
    """
    values = np.atleast_2d(values)
    if kernel.order == 0:
        return np.full(values.shape[0], float(kernel()))
    dw, v = _drift_increments(kernel, grid, values, field)
    if isinstance(kernel, ProductBasisKernel):
        return _kappa_product(kernel, grid, dw, v)
    return _kappa_dense(kernel, grid, dw, v)


def compensated_integrals(kernel, grid, values, field):
    """n! times the iterated sum against the compensated increments dx - rho dt."""
    values = np.atleast_2d(values)
    if kernel.order == 0:
        return np.full(values.shape[0], float(kernel()))
    dw, v = _drift_increments(kernel, grid, values, field)
    return kernel.wiener_integrals(grid, dw - v)


def _check_order(n, kernel):
    if n != kernel.order:
        raise OrderMismatch(f"order {n} requested for a kernel of order {kernel.order}")


def I_kappa(n, kernel, path, field):
    """Compensated multiple integral of order n along one conditioned path."""
    _check_order(n, kernel)
    return float(kappa_integrals(kernel, path.grid, path.values, field)[0])


def I_kappa_compensated_form(n, kernel, path, field):
    """The iterated form of I_kappa over compensated increments."""
    _check_order(n, kernel)
    return float(compensated_integrals(kernel, path.grid, path.values, field)[0])


# Families over horizons

class KernelFamily:
    """
    Slices a_n(., t) of order n-1 on [0, t], indexed by the horizon t.

    A slice at time t on the domain [0, h] is a weighted sum of component
    kernels on [0, h]; for product-basis kernels the weights carry the exact
    t-dependence, other families are frozen at their knots.
    """

    def __init__(self, order, components, knots=None):
        if order < 1:
            raise OrderMismatch("a kernel family needs order >= 1")
        self.order = order
        self._components = components
        self.knots = None if knots is None else np.asarray(knots, dtype=float)

    @classmethod
    def from_kernel(cls, kernel):
        """Family of slices of a symmetric kernel of order n >= 1."""
        n = kernel.order
        if isinstance(kernel, ProductBasisKernel):

            def components(h):
                out = []
                for coef, factors in kernel.terms:
                    for j, f in enumerate(factors):
                        rest = factors[:j] + factors[j + 1:]
                        weight = (lambda c, g: lambda t: c * np.asarray(g(t), dtype=float) / n)(coef, f)
                        out.append((weight, ProductBasisKernel(n - 1, h, [(1.0, rest)])))
                return out

            return cls(n, components)

        if n == 1:
            return cls(1, lambda h: [(kernel, constant_kernel(1.0, 0, h))])

        def frozen(h):
            return [(_unit, kernel.slice(h) if h > 0 else None)]

        return cls(n, frozen)

    @classmethod
    def from_slices(cls, slices):
        """
        Family given by its slices at knots.

        Args:
            slices: mapping t -> kernel of a common order on [0, t]
        """
        knots = sorted(slices)
        orders = {slices[t].order for t in knots}
        if len(orders) != 1:
            raise OrderMismatch(f"slices of different orders {sorted(orders)}")
        for t in knots:
            if not math.isclose(slices[t].horizon, t, rel_tol=1e-9, abs_tol=1e-12):
                raise HorizonMismatch(f"slice at t={t} has horizon {slices[t].horizon}")

        def components(h):
            i = np.searchsorted(knots, h + 1e-12, side="right") - 1
            return [(_unit, slices[knots[max(i, 0)]])]

        return cls(orders.pop() + 1, components, knots)

    def components(self, horizon):
        return self._components(horizon)

    def slice_at(self, t, horizon=None):
        """a_n(., t) restricted to [0, horizon] (horizon defaults to t)."""
        horizon = t if horizon is None else horizon
        comps = self.components(horizon)
        if all(isinstance(k, ProductBasisKernel) for _, k in comps):
            terms = [(float(w(t)) * c, fs) for w, k in comps for c, fs in k.terms]
            return ProductBasisKernel(self.order - 1, horizon, terms)
        if len(comps) == 1:
            return comps[0][1]
        raise OrderMismatch("cannot combine slices of mixed representations")

    def induced_kernel(self, grid):
        """
        The symmetric kernel b_n = n sym((s, t) -> a_n(s, t) 1{s < t}) on the cells of `grid`.

        For a family built from a symmetric kernel, b_n agrees with that kernel
        off the diagonal cells.
        """
        n = self.order
        if n > MAX_GRID_ORDER:
            raise OrderTooHigh(f"induced kernels support order <= {MAX_GRID_ORDER}")
        N = grid.n_steps
        mids = grid.midpoints
        cube = np.zeros((N,) * n)
        for j in range(N):
            sl = self.slice_at(mids[j], mids[j])
            if n == 1:
                cube[j] = float(sl())
                continue
            if j == 0:
                continue
            mesh = np.meshgrid(*([mids[:j]] * (n - 1)), indexing="ij")
            cube[(slice(0, j),) * (n - 1) + (j,)] = np.asarray(sl(*mesh), dtype=float)
        return GridKernel(grid, n * cube)


def _unit(t):
    return np.ones(np.shape(t)) if np.ndim(t) else 1.0


class FieldFamily:
    """Drift fields alpha^t for the horizons t_k = grid.times[steps[k]]."""

    def __init__(self, steps, horizons, fields):
        self.steps = np.asarray(steps, dtype=int)
        self.horizons = np.asarray(horizons, dtype=float)
        self.fields = list(fields)

    @classmethod
    def from_barrier(cls, barrier, grid, n_horizons=DEFAULT_HORIZONS, backend="auto", policy="clamp",
                     max_abs=1e3, **pde_options):
        """
        One survival model per horizon of a uniform subsampling of the path grid.

        Constant and linear barriers use closed forms; other barriers solve one
        backward problem per horizon.
        """
        if n_horizons < 1 or grid.n_steps % n_horizons:
            raise InvalidGrid(f"{n_horizons} horizons do not subsample a {grid.n_steps}-step grid")
        stride = grid.n_steps // n_horizons
        steps = np.arange(1, n_horizons + 1) * stride
        horizons = grid.times[steps]
        fields = [DriftField(survival_model(barrier, t, backend, **pde_options), policy, max_abs) for t in horizons]
        logger.info("field family: %d horizons for %s barrier", n_horizons, barrier.kind)
        return cls(steps, horizons, fields)

    def __len__(self):
        return len(self.fields)

    def survival(self, t):
        """mu(tau >= t) = alpha^t(0, 0), interpolated between the horizons."""
        values = [1.0] + [float(f.alpha(0.0, 0.0)) for f in self.fields]
        return np.interp(t, np.concatenate([[0.0], self.horizons]), values)


def survival_curve(barrier, fields=None):
    """t -> mu(tau >= t): closed form when available, else from a FieldFamily."""
    if isinstance(barrier, (ConstantBarrier, LinearBarrier)):
        return lambda t: alpha_closed_form(barrier, 0.0, 0.0, np.asarray(t, dtype=float))
    if fields is None:
        raise ValueError(f"{barrier.kind} barrier needs a field family for its survival curve")
    return fields.survival


def _knot_steps(n, grid, family, fields):
    if fields is not None:
        return np.concatenate([[0], fields.steps])
    if family.knots is not None:
        steps = np.rint(family.knots / grid.dt).astype(int)
        if not np.allclose(steps * grid.dt, family.knots, atol=1e-9):
            raise HorizonMismatch("family knots are not nodes of the path grid")
        return np.unique(np.concatenate([[0], steps]))
    if n > 1:
        raise ValueError("orders above 1 need a field family")
    return np.array([0])


def nu_integrals(family, batch, hits, fields=None, max_spacing=None):
    """
    I^nu_n along every path of a Brownian PathBatch.

    Args:
        family: KernelFamily of order n
        batch: PathBatch of unconditioned paths
        hits: HittingBatch of the paths (bridge mode for unbiased survival)
        fields: FieldFamily for the inner operators (required for n >= 2)
        max_spacing: largest allowed distance between horizons

    Returns:
        array (n_paths,)

    Raises:
        TGridTooCoarse: horizons further apart than max_spacing
    """
    n = family.order
    grid = batch.grid
    knot_steps = _knot_steps(n, grid, family, fields)
    if max_spacing is not None:
        gaps = np.diff(np.concatenate([grid.times[knot_steps], [grid.horizon]]))
        if gaps.max() > max_spacing + 1e-12:
            raise TGridTooCoarse(f"horizons {gaps.max():.4g} apart, at most {max_spacing} allowed")

    stopped = stop_values(batch.values, hits)
    deta = np.diff(stopped, axis=1)
    left = grid.times[:-1]
    kidx = np.searchsorted(knot_steps, np.arange(grid.n_steps), side="right") - 1
    total = np.zeros(batch.count)
    for k, m in enumerate(knot_steps):
        steps = kidx == k
        if not np.any(steps):
            continue
        h = grid.times[m]
        alive = ~hits.hit | (hits.crossing_index >= m)
        for weight, kernel in family.components(h):
            inner = np.zeros(batch.count)
            if n == 1:
                inner[:] = float(kernel())
            elif m > 0 and np.any(alive):
                field = fields.fields[k - 1]
                sub = grid.restrict(m)
                inner[alive] = kappa_integrals(kernel, sub, batch.values[alive, : m + 1], field)
            w = np.broadcast_to(np.asarray(weight(left[steps]), dtype=float), (int(steps.sum()),))
            total += inner * (deta[:, steps] @ w)
    return n * total


def I_nu(n, family, path, hit, fields=None):
    """I^nu_n along one unstopped Brownian path with its first passage."""
    if n != family.order:
        raise OrderMismatch(f"order {n} requested for a family of order {family.order}")
    batch = PathBatch(path.grid, path.values[None, :], 0)
    return float(nu_integrals(family, batch, _single_batch(hit), fields)[0])


def nu_norm_oracle(family, grid, survival, fields=None):
    """
    n n! int_0^1 mu(tau >= t) ||a_n(., t)||^2 dt with the same horizon freezing
    as nu_integrals (trapezoid in t on the path grid).
    """
    n = family.order
    knot_steps = _knot_steps(n, grid, family, fields)
    times = grid.times
    mu = np.asarray(survival(times), dtype=float)
    mass = 0.5 * (mu[:-1] + mu[1:]) * grid.dt
    kidx = np.searchsorted(knot_steps, np.arange(grid.n_steps), side="right") - 1
    total = 0.0
    for k, m in enumerate(knot_steps):
        steps = np.flatnonzero(kidx == k)
        if steps.size == 0 or (n > 1 and m == 0):
            continue
        comps = family.components(times[m])
        gram = np.array([[kernel_inner(a, b) for _, b in comps] for _, a in comps])
        weights = np.stack([np.broadcast_to(np.asarray(w(times[steps]), dtype=float), steps.shape) for w, _ in comps])
        norms = np.einsum("ij,ik,kj->j", weights, gram, weights)
        total += math.fsum(mass[steps] * norms)
    return n * math.factorial(n) * total


# Verification suites

def kappa_suite(field, kernels, grid, n_paths, seed, method="h_transform", threshold=DEFAULT_THRESHOLD,
                iso_threshold=5.0, workers=1, prefix=""):
    """
    Isometry and cross-order orthogonality of I^kappa under the conditioned law.

    Args:
        field: DriftField of the horizon t = grid.horizon
        kernels: mapping name -> kernel on [0, t] (orders 0..3)

    Returns:
        (tests, rows) with rows (order, estimate, stderr, oracle) of E[(I^kappa_n a)^2]
    """
    sampler = conditioned_sampler(field, grid, method)

    def evaluate(batch):
        return {name: kappa_integrals(k, grid, batch.values, field) for name, k in kernels.items()}

    values = collect(evaluate, sampler, n_paths, seed, workers)
    tests, rows = [], []
    for name, k in kernels.items():
        if k.order == 0:
            continue
        norm = math.factorial(k.order) * kernel_inner(k, k)
        est = from_samples(values[name] ** 2)
        tests.append(z_result(f"{prefix}kappa_isometry[{name}]", est.mean / norm, est.stderr / norm, 1.0,
                              iso_threshold))
        rows.append({"order": k.order, "estimate": est.mean, "stderr": est.stderr, "oracle": norm})
    names = list(kernels)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            if kernels[a].order != kernels[b].order:
                tests.append(product_test(values[a], values[b], threshold, f"{prefix}kappa_orthogonal[{a},{b}]"))
    return tests, rows


def nu_suite(barrier, kernels, grid, n_paths, seed, fields=None, mode="bridge", threshold=DEFAULT_THRESHOLD,
             iso_threshold=5.0, workers=1, survival=None):
    """
    Norm identity, sandwich bounds and cross-order orthogonality of I^nu.

    Args:
        barrier: Barrier
        kernels: mapping name -> symmetric kernel of order >= 1 on [0, horizon]
        fields: FieldFamily on the path grid (required for orders >= 2)
        survival: t -> mu(tau >= t), default survival_curve(barrier, fields)

    Returns:
        (tests, rows)
    """
    survival = survival or survival_curve(barrier, fields)
    families = {name: KernelFamily.from_kernel(k) for name, k in kernels.items()}

    def evaluate(batch):
        hits = batch_first_passage(batch, barrier, mode)
        return {name: nu_integrals(fam, batch, hits, fields) for name, fam in families.items()}

    values = collect(evaluate, brownian_sampler(grid), n_paths, seed, workers)
    survive_all = float(survival(grid.horizon))
    tests, rows = [], []
    for name, k in kernels.items():
        n = k.order
        oracle = nu_norm_oracle(families[name], grid, survival, fields)
        full = math.factorial(n) * kernel_inner(k, k)
        est = from_samples(values[name] ** 2)
        tests.append(z_result(f"nu_norm[{name}]", est.mean, est.stderr, oracle, iso_threshold))
        lower, upper = survive_all * full, full
        tests.append(flag_result(f"nu_sandwich_oracle[{name}]", lower - 1e-9 <= oracle <= upper + 1e-9, oracle))
        tests.append(flag_result(
            f"nu_sandwich_estimate[{name}]",
            est.mean + iso_threshold * est.stderr >= lower and est.mean - iso_threshold * est.stderr <= upper,
            est.mean,
        ))
        rows.append({"order": n, "estimate": est.mean, "stderr": est.stderr, "oracle": oracle})
    names = list(kernels)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            if kernels[a].order != kernels[b].order:
                tests.append(product_test(values[a], values[b], threshold, f"nu_orthogonal[{a},{b}]"))
    return tests, rows


# Dictionary of F_g-measurable test functionals of the stopped path.
def _test_functionals(stopped, hits, grid):
    def at(fraction):
        return stopped[:, int(round(fraction * grid.n_steps))]

    return {
        "one": np.ones(stopped.shape[0]),
        "eta_end": at(1.0),
        "eta_mid": at(0.5),
        "eta_end_squared": at(1.0) ** 2,
        "eta_quarter_product": at(0.25) * at(0.75),
        "survived": (~hits.hit).astype(float),
    }


def alive_mask(hits, n_steps):
    """1{t_j < tau} for the left end t_j of every step."""
    columns = np.arange(n_steps)[None, :]
    return (~hits.hit[:, None] | (columns <= hits.crossing_index[:, None])).astype(float)


def conditioning_check(n, kernel, grid, barrier, n_paths, seed, mode="bridge", threshold=DEFAULT_THRESHOLD,
                       workers=1):
    """
    Check that n int_0^1 1{tau >= t} I_{n-1}(a_n(., t)) dw_t is the conditional
    expectation of I_n a_n given the stopped path.

    Returns:
        report dict with one z-score test per test functional
    """
    _check_order(n, kernel)
    if n not in (1, 2, 3):
        raise OrderTooHigh(f"conditioning check supports orders 1..3, got {n}")
    check_horizon(kernel, grid)

    def evaluate(batch):
        hits = batch_first_passage(batch, barrier, mode)
        dw = batch.increments
        x = kernel.wiener_integrals(grid, dw)
        y = kernel.wiener_integrals(grid, dw, alive_mask(hits, grid.n_steps))
        out = {"residual": x - y}
        for name, z in _test_functionals(stop_values(batch.values, hits), hits, grid).items():
            out["z_" + name] = z
        return out

    values = collect(evaluate, brownian_sampler(grid), n_paths, seed, workers)
    tests = [
        product_test(values["residual"], values[key], threshold, f"conditioning[n={n}][{key[2:]}]")
        for key in values if key.startswith("z_")
    ]
    return {"order": n, "tests": tests, "all_pass": all(t["pass"] for t in tests)}


def coefficient_recovery_example(grid, n_paths, seed, level=1.0, n_bins=8, mode="bridge",
                                 threshold=DEFAULT_THRESHOLD, workers=1):
    """
    First chaos coefficients of f = w(tau ^ t) for a constant barrier.

    The Wiener coefficient a_1(t) = mu(tau >= t) is recovered on t-bins from
    E[f (w(t'') - w(t'))]; the stopped-flow kernel of f is identically 1 and is
    recovered from E[f (eta(t'') - eta(t'))] / int mu(tau >= t) dt. The two
    kernels differ, so the representations are not the same.

    Returns:
        report dict with tests and per-bin rows
    """
    barrier = ConstantBarrier(level, grid.horizon)
    if grid.n_steps % n_bins:
        raise InvalidGrid(f"{n_bins} bins do not divide a {grid.n_steps}-step grid")
    edges = np.arange(n_bins + 1) * (grid.n_steps // n_bins)

    def evaluate(batch):
        hits = batch_first_passage(batch, barrier, mode)
        eta = stop_values(batch.values, hits)
        f = eta[:, -1]
        out = {}
        for b in range(n_bins):
            lo, hi = edges[b], edges[b + 1]
            out[f"w{b}"] = f * (batch.values[:, hi] - batch.values[:, lo])
            out[f"eta{b}"] = f * (eta[:, hi] - eta[:, lo])
        return out

    values = collect(evaluate, brownian_sampler(grid), n_paths, seed, workers)

    def survival(t):
        return float(alpha_closed_form(barrier, 0.0, 0.0, t)) if t > 0 else 1.0

    tests, rows = [], []
    for b in range(n_bins):
        t0, t1 = grid.times[edges[b]], grid.times[edges[b + 1]]
        width = t1 - t0
        mass, _ = integrate.quad(survival, t0, t1, epsabs=1e-12)
        w_est = from_samples(values[f"w{b}"])
        e_est = from_samples(values[f"eta{b}"])
        a1, a1_se = w_est.mean / width, w_est.stderr / width
        nu, nu_se = e_est.mean / mass, e_est.stderr / mass
        oracle = mass / width
        tests.append(z_result(f"a1[{t0:.3f},{t1:.3f}]", a1, a1_se, oracle, threshold))
        tests.append(z_result(f"nu_kernel[{t0:.3f},{t1:.3f}]", nu, nu_se, 1.0, threshold))
        rows.append({
            "t_start": t0, "t_end": t1, "a1": a1, "a1_stderr": a1_se, "a1_oracle": oracle,
            "nu_kernel": nu, "nu_stderr": nu_se,
        })
    last = rows[-1]
    separated = abs(last["a1"] - 1.0) > threshold * last["a1_stderr"]
    tests.append(flag_result("representations_differ", separated, last["a1"], 1.0))
    return {"tests": tests, "rows": rows, "all_pass": all(t["pass"] for t in tests)}


def _kernel_sum(a, b, sign):
    return ProductBasisKernel(a.order, a.horizon, list(a.terms) + [(sign * c, fs) for c, fs in b.terms])


def nu_gram(kernels, grid, survival, fields=None):
    """
    Oracle Gram matrix E[I^nu a I^nu b] of kernels of one order.

    Off-diagonal entries come from the norm oracle by polarization, so every
    kernel must be a ProductBasisKernel.
    """
    names = list(kernels)
    gram = np.empty((len(names), len(names)))
    for i, a in enumerate(names):
        gram[i, i] = nu_norm_oracle(KernelFamily.from_kernel(kernels[a]), grid, survival, fields)
        for j in range(i + 1, len(names)):
            b = names[j]
            plus, minus = (
                nu_norm_oracle(KernelFamily.from_kernel(_kernel_sum(kernels[a], kernels[b], sign)), grid, survival,
                               fields)
                for sign in (1.0, -1.0)
            )
            gram[i, j] = gram[j, i] = 0.25 * (plus - minus)
    return gram


def parseval_study(barrier, grid, n_paths, seed, kernels_by_order, fields=None, mode="bridge",
                   threshold=DEFAULT_THRESHOLD, workers=1):
    """
    Residual ||f||^2 - sum of projections for f = eta_g(horizon).

    The projection on orders <= N is the least-squares fit of f on a constant
    and the I^nu integrals of the given kernels of orders 1..N, on the same
    paths. Each order's share of that fit is compared with the chaos energy
    c' G^-1 c built from the cross moments c = E[f I^nu a] and the oracle Gram
    matrix G; the residual left by those energies must stay nonnegative.

    Args:
        kernels_by_order: mapping order -> mapping name -> kernel
        threshold: z-score bound of the energy comparisons

    Returns:
        report dict with tests and rows (order, residual, energy, chaos_energy)
    """
    survival = survival_curve(barrier, fields)
    families = {
        (order, name): KernelFamily.from_kernel(k)
        for order, named in kernels_by_order.items() for name, k in named.items()
    }

    def evaluate(batch):
        hits = batch_first_passage(batch, barrier, mode)
        out = {"f": stop_values(batch.values, hits)[:, -1]}
        for (order, name), fam in families.items():
            out[f"{order}:{name}"] = nu_integrals(fam, batch, hits, fields)
        return out

    values = collect(evaluate, brownian_sampler(grid), n_paths, seed, workers)
    f = values["f"]
    size = f.size
    norm = math.fsum(f**2) / size
    norm_se = float(np.std(f**2, ddof=1)) / math.sqrt(size)
    mean = float(np.mean(f))
    columns = [np.ones(size)]
    tests, rows = [], []
    previous = norm
    remaining = norm - mean**2
    noise = norm_se**2
    for order in [0] + sorted(kernels_by_order):
        if order:
            named = kernels_by_order[order]
            block = np.column_stack([values[f"{order}:{name}"] for name in named])
            columns += list(block.T)
        X = np.column_stack(columns)
        coef, *_ = np.linalg.lstsq(X, f, rcond=None)
        residual = math.fsum((f - X @ coef) ** 2) / size
        energy = previous - residual
        row = {"order": order, "residual": residual, "energy": energy}
        if order:
            if all(isinstance(k, ProductBasisKernel) for k in named.values()):
                gram = nu_gram(named, grid, survival, fields)
            else:
                logger.warning("parseval order %d: sample Gram matrix for non-product kernels", order)
                gram = block.T @ block / size
            cross = block.T @ f / size
            beta = np.linalg.solve(gram, cross)
            chaos_energy = float(cross @ beta)
            # linearized samples of c' G^-1 c
            energy_se = 2.0 * float(np.std(f * (block @ beta), ddof=1)) / math.sqrt(size)
            remaining -= chaos_energy
            noise += energy_se**2
            row.update({"chaos_energy": chaos_energy, "chaos_energy_stderr": energy_se})
            tests.append(z_result(f"parseval_energy[{order}]", energy, energy_se, chaos_energy, threshold))
        rows.append(row)
        previous = residual
    tests.append(flag_result("parseval_bessel", remaining >= -threshold * math.sqrt(noise), remaining))
    if 1 in kernels_by_order:
        tests.append(flag_result("parseval_first_order_exact", rows[1]["residual"] <= 1e-10 * max(norm, 1.0),
                                 rows[1]["residual"], 0.0))
    return {"norm": norm, "tests": tests, "rows": rows, "all_pass": all(t["pass"] for t in tests)}


def transformed_path_study(kernel, field, grid, n_paths, seed, method="h_transform", tolerance=1e-2,
                           min_fraction=0.99, workers=1):
    """
    Pathwise agreement of I^kappa_n along x with I_n along T_g(x), and of the
    double-sum form with the compensated iterated form.

    Returns:
        report dict with the agreement fractions and tests
    """
    n = kernel.order

    def evaluate(batch):
        kappa = kappa_integrals(kernel, grid, batch.values, field)
        moved = transform_ensemble(batch, field)
        return {
            "kappa": kappa,
            "transformed": kernel.wiener_integrals(grid, moved.increments),
            "compensated": compensated_integrals(kernel, grid, batch.values, field),
        }

    values = collect(evaluate, conditioned_sampler(field, grid, method), n_paths, seed, workers)
    transformed = float(np.mean(np.abs(values["kappa"] - values["transformed"]) <= tolerance))
    compensated = float(np.mean(np.abs(values["kappa"] - values["compensated"]) <= tolerance))
    tests = [
        flag_result(f"transformed_path[n={n}]", transformed >= min_fraction, transformed, min_fraction),
        flag_result(f"compensated_form[n={n}]", compensated >= min_fraction, compensated, min_fraction),
    ]
    return {
        "order": n,
        "transformed_fraction": transformed,
        "compensated_fraction": compensated,
        "max_compensated_gap": float(np.max(np.abs(values["kappa"] - values["compensated"]))),
        "tests": tests,
    }
