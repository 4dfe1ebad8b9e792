"""
Hermite polynomials, symmetric kernels and multiple Wiener integrals.

A kernel of order n is a symmetric square integrable function a_n on [0, t]^n.
Along a path its multiple Wiener integral is n! times the iterated Ito sum over
the strict simplex s_1 < ... < s_n of grid steps (diagonal cells excluded).
Kernel values are taken at step midpoints.
"""

import logging
import math
from collections import Counter
from dataclasses import dataclass
from itertools import permutations

import numpy as np
from scipy import integrate
from scipy.special import comb

from .errors import HorizonMismatch, KernelError, OrderMismatch, OrderTooHigh
from .paths import TimeGrid

logger = logging.getLogger(__name__)

MAX_GRID_ORDER = 4
# Largest dense kernel cube (entries) contracted against increments.
MAX_DENSE_ENTRIES = 2 ** 24


def hermite(k, x):
    """
    Probabilists' Hermite polynomial H_k(x).

    H_0 = 1, H_1 = x, H_{k+1} = x H_k - k H_{k-1}.
    """
    if k < 0:
        raise ValueError("Hermite degree must be non-negative")
    x = np.asarray(x)
    if x.dtype != np.longdouble:
        x = x.astype(float)
    prev = np.ones_like(x)
    if k == 0:
        return prev if prev.ndim else float(prev)
    cur = x.copy()
    for j in range(1, k):
        prev, cur = cur, x * cur - j * prev
    return cur if cur.ndim else float(cur)


def hermite_shift_check(n, x, y):
    """
    Residual |H_n(x+y) - sum_m C(n,m) H_{n-m}(x) y^m| of the shift identity.

    Both sides are evaluated in long double, which is wider than float64 on
    x86-64 and aarch64 Linux.
    """
    x = np.array([x], dtype=np.longdouble)
    y = np.array([y], dtype=np.longdouble)
    expansion = sum(comb(n, m, exact=True) * hermite(n - m, x) * y**m for m in range(n + 1))
    return float(abs(hermite(n, x + y) - expansion)[0])


# One-dimensional basis functions

def _constant(s, value=1.0):
    return np.full(np.shape(s), float(value)) if np.ndim(s) else float(value)


def _monomial(s, power=1):
    return np.asarray(s, dtype=float) ** power


def _cosine(s, frequency=1.0, horizon=1.0):
    return np.cos(2.0 * np.pi * frequency * np.asarray(s, dtype=float) / horizon)


def _sine(s, frequency=1.0, horizon=1.0):
    return np.sin(2.0 * np.pi * frequency * np.asarray(s, dtype=float) / horizon)


def _cosine_basis(s, k=0, horizon=1.0):
    s = np.asarray(s, dtype=float)
    if k == 0:
        return np.full(s.shape, 1.0 / np.sqrt(horizon)) if s.ndim else 1.0 / np.sqrt(horizon)
    return np.sqrt(2.0 / horizon) * np.cos(k * np.pi * s / horizon)


BASIS = {
    "constant": _constant,
    "monomial": _monomial,
    "cosine": _cosine,
    "sine": _sine,
    "cosine_basis": _cosine_basis,
}


@dataclass(frozen=True)
class BasisFunction:
    """Named one-dimensional primitive; hashable so equal factors can be grouped."""

    name: str
    params: tuple = ()

    def __post_init__(self):
        if self.name not in BASIS:
            raise KernelError(f"unknown basis function {self.name!r}, expected one of {sorted(BASIS)}")

    def __call__(self, s):
        return BASIS[self.name](s, **dict(self.params))

    def to_dict(self):
        return {"name": self.name, **dict(self.params)}


def basis_function(name, **params):
    return BasisFunction(name, tuple(sorted(params.items())))


def inner_1d(f, g, horizon):
    value, _ = integrate.quad(lambda s: float(f(s)) * float(g(s)), 0.0, horizon, limit=200, epsabs=1e-12)
    return value


# Discrete iterated sums

def strict_simplex_mask(n_cells, order):
    """Boolean cube marking i_1 < i_2 < ... < i_order."""
    mask = np.ones((n_cells,) * order, dtype=bool)
    axes = [np.arange(n_cells).reshape([-1 if a == k else 1 for a in range(order)]) for k in range(order)]
    for k in range(order - 1):
        mask &= axes[k] < axes[k + 1]
    return mask


def simplex_sum(cube, increments, last_mask=None):
    """
    Row-wise sum over i_1 < ... < i_n of cube[i] * dW[i_1] ... dW[i_n].

    Args:
        cube: array (N,)*n (n = 0 allowed)
        increments: array (n_paths, N)
        last_mask: optional (n_paths, N) weights applied to the last increment

    Returns:
        array (n_paths,)
    """
    increments = np.atleast_2d(increments)
    n_paths, n_cells = increments.shape
    order = np.ndim(cube)
    if order == 0:
        return np.full(n_paths, float(cube))
    if n_cells ** order > MAX_DENSE_ENTRIES:
        raise OrderTooHigh(f"dense order-{order} kernel on {n_cells} cells is too large")
    masked = np.where(strict_simplex_mask(n_cells, order), cube, 0.0).reshape(-1, n_cells)
    last = increments if last_mask is None else increments * last_mask
    rows = max(1, MAX_DENSE_ENTRIES // (4 * masked.shape[0]))
    result = np.empty(n_paths)
    for lo in range(0, n_paths, rows):
        hi = min(lo + rows, n_paths)
        out = last[lo:hi] @ masked.T
        for _ in range(order - 1):
            out = np.einsum("pan,pn->pa", out.reshape(hi - lo, -1, n_cells), increments[lo:hi])
        result[lo:hi] = out.reshape(hi - lo)
    return result


def iterated_product(factors, increments, last_mask=None):
    """
    Row-wise sum over i_1 < ... < i_n of f_1[i_1] dW[i_1] ... f_n[i_n] dW[i_n].

    Linear in the number of steps: each order is an exclusive cumulative sum of
    the previous one.
    """
    increments = np.atleast_2d(increments)
    if len(factors) == 0:
        return np.ones(increments.shape[0])
    acc = None
    for k, f in enumerate(factors):
        terms = f * increments if acc is None else acc * f * increments
        if k == len(factors) - 1:
            if last_mask is not None:
                terms = terms * last_mask
            return terms.sum(axis=1)
        running = np.cumsum(terms, axis=1)
        acc = np.zeros_like(running)
        acc[:, 1:] = running[:, :-1]


# Kernels

class SymmetricKernel:
    """Base class: order, horizon, pointwise evaluation and grid integrals."""

    representation = None

    def __init__(self, order, horizon):
        if order < 0:
            raise KernelError("kernel order must be non-negative")
        self.order = int(order)
        self.horizon = float(horizon)

    def __call__(self, *points):
        raise NotImplementedError

    def cube(self, grid):
        """Values at the step midpoints of `grid`, shape (n_steps,)*order."""
        if self.order == 0:
            return np.asarray(self())
        mesh = np.meshgrid(*([grid.midpoints] * self.order), indexing="ij")
        return np.asarray(self(*mesh), dtype=float)

    def wiener_integrals(self, grid, increments, last_mask=None):
        """n! times the strict-simplex sums for each row of `increments`."""
        return math.factorial(self.order) * simplex_sum(self.cube(grid), increments, last_mask)

    def slice(self, t):
        """The kernel a_n(., t) of order n-1 on [0, t]."""
        raise NotImplementedError

    def to_dict(self):
        return {"representation": self.representation, "order": self.order, "horizon": self.horizon}


class CallableKernel(SymmetricKernel):
    """Kernel given by a vectorized function declared symmetric."""

    representation = "callable"

    def __init__(self, order, horizon, func):
        super().__init__(order, horizon)
        self.func = func

    def __call__(self, *points):
        return self.func(*points)

    def slice(self, t):
        if self.order == 0:
            raise OrderMismatch("cannot slice an order-0 kernel")
        func = self.func
        return CallableKernel(self.order - 1, t, lambda *s: func(*s, t))


def _symmetric_part(values):
    order = values.ndim
    if order <= 1:
        return values
    perms = list(permutations(range(order)))
    if all(np.array_equal(values, values.transpose(p)) for p in perms):
        return values
    stack = np.stack([values.transpose(p) for p in perms])
    # equal multisets summed in equal order give bitwise symmetric output
    stack.sort(axis=0)
    return stack.sum(axis=0) / len(perms)


class GridKernel(SymmetricKernel):
    """Kernel piecewise constant on the cells of a TimeGrid, symmetrized at construction."""

    representation = "grid"

    def __init__(self, grid, values):
        values = np.asarray(values, dtype=float)
        if values.ndim > MAX_GRID_ORDER:
            raise OrderTooHigh(f"grid kernels support order <= {MAX_GRID_ORDER}, got {values.ndim}")
        if values.shape != (grid.n_steps,) * values.ndim:
            raise KernelError(f"grid kernel values {values.shape} do not match {grid.n_steps} cells")
        super().__init__(values.ndim, grid.horizon)
        self.grid = grid
        values = _symmetric_part(values).copy()
        values.flags.writeable = False
        self.values = values

    @classmethod
    def from_function(cls, grid, func, order):
        mesh = np.meshgrid(*([grid.midpoints] * order), indexing="ij")
        return cls(grid, func(*mesh) if order else func())

    def _cells(self, s):
        return np.clip(np.floor(np.asarray(s, dtype=float) / self.grid.dt).astype(int), 0, self.grid.n_steps - 1)

    def __call__(self, *points):
        if self.order == 0:
            return float(self.values)
        return self.values[tuple(self._cells(p) for p in points)]

    def cube(self, grid):
        if grid == self.grid:
            return self.values
        return super().cube(grid)

    def wiener_integrals(self, grid, increments, last_mask=None):
        increments = np.atleast_2d(increments)
        factor = grid.n_steps // self.grid.n_steps
        refines = (
            grid != self.grid
            and factor > 1
            and grid.n_steps == factor * self.grid.n_steps
            and math.isclose(grid.horizon, self.grid.horizon)
        )
        if refines:
            # path finer than the kernel: aggregate increments per kernel cell
            coarse = increments.reshape(increments.shape[0], self.grid.n_steps, factor).sum(axis=2)
            mask = None
            if last_mask is not None:
                mask = np.atleast_2d(last_mask).reshape(increments.shape[0], self.grid.n_steps, factor)[:, :, 0]
            return math.factorial(self.order) * simplex_sum(self.values, coarse, mask)
        return super().wiener_integrals(grid, increments, last_mask)

    def slice(self, t):
        if self.order == 0:
            raise OrderMismatch("cannot slice an order-0 kernel")
        m = int(round(t / self.grid.dt))
        if m < 1 or not math.isclose(m * self.grid.dt, t, rel_tol=1e-9, abs_tol=1e-12):
            raise HorizonMismatch(f"slice time {t} is not a node of the kernel grid")
        column = min(m, self.grid.n_steps - 1)
        index = (slice(0, m),) * (self.order - 1) + (column,)
        return GridKernel(self.grid.restrict(m), self.values[index])


class ProductBasisKernel(SymmetricKernel):
    """
    Finite sum of symmetrized tensor products of 1-D basis functions.

    Args:
        order: n
        horizon: t
        terms: sequence of (coefficient, tuple of n BasisFunction)
    """

    representation = "product"

    def __init__(self, order, horizon, terms):
        super().__init__(order, horizon)
        cleaned = []
        for coef, factors in terms:
            factors = tuple(factors)
            if len(factors) != order:
                raise KernelError(f"term has {len(factors)} factors, kernel order is {order}")
            cleaned.append((float(coef), factors))
        self.terms = cleaned

    def _permuted(self, factors):
        return Counter(permutations(factors))

    def __call__(self, *points):
        if len(points) != self.order:
            raise OrderMismatch(f"kernel of order {self.order} evaluated at {len(points)} points")
        total = 0.0
        norm = math.factorial(self.order)
        for coef, factors in self.terms:
            for perm, count in self._permuted(factors).items():
                value = coef * count / norm
                for f, p in zip(perm, points):
                    value = value * f(p)
                total = total + value
        return total

    def wiener_integrals(self, grid, increments, last_mask=None):
        increments = np.atleast_2d(increments)
        mids = grid.midpoints
        total = np.zeros(increments.shape[0])
        for coef, factors in self.terms:
            for perm, count in self._permuted(factors).items():
                total += coef * count * iterated_product([f(mids) for f in perm], increments, last_mask)
        return total

    def orthonormal(self, tolerance=1e-6):
        """Whether the distinct factors of every term are orthonormal on [0, t]."""
        for _, factors in self.terms:
            distinct = list(Counter(factors))
            for i, e in enumerate(distinct):
                for g in distinct[i:]:
                    target = 1.0 if e == g else 0.0
                    if abs(inner_1d(e, g, self.horizon) - target) > tolerance:
                        return False
        return True

    def hermite_integrals(self, grid, increments):
        """
        Closed-form evaluation prod_i H_{k_i}(int e_i dw) for orthonormal factors.

        Every term must be built from distinct orthonormal basis functions
        e_i repeated k_i times.
        """
        if not self.orthonormal():
            raise KernelError("hermite mode needs orthonormal basis factors")
        increments = np.atleast_2d(increments)
        mids = grid.midpoints
        total = np.zeros(increments.shape[0])
        for coef, factors in self.terms:
            counts = Counter(factors)
            value = np.full(increments.shape[0], coef)
            for e, k in counts.items():
                value *= hermite(k, increments @ e(mids))
            total += value
        return total

    def slice(self, t):
        if self.order == 0:
            raise OrderMismatch("cannot slice an order-0 kernel")
        terms = []
        for coef, factors in self.terms:
            for j, f in enumerate(factors):
                terms.append((coef * float(f(t)) / self.order, factors[:j] + factors[j + 1:]))
        return ProductBasisKernel(self.order - 1, t, terms)

    def to_dict(self):
        out = super().to_dict()
        out["terms"] = [{"coef": c, "factors": [f.to_dict() for f in fs]} for c, fs in self.terms]
        return out


def constant_kernel(value, order=0, horizon=1.0):
    """a_n identically equal to `value`."""
    return ProductBasisKernel(order, horizon, [(value, (basis_function("constant"),) * order)])


def default_kernels(order, horizon=1.0):
    """
    Test kernels of one order: constant one, the coordinate sum
    s_1 + ... + s_n, and a tensor power of the first orthonormal cosine.
    """
    one = basis_function("constant")
    kernels = {"one": constant_kernel(1.0, order, horizon)}
    if order >= 1:
        kernels["sum"] = ProductBasisKernel(
            order, horizon, [(float(order), (basis_function("monomial", power=1),) + (one,) * (order - 1))]
        )
        kernels["cosine"] = ProductBasisKernel(
            order, horizon, [(1.0, (basis_function("cosine_basis", k=1, horizon=horizon),) * order)]
        )
    return kernels


def kernel_from_dict(spec, horizon=1.0):
    """
    Build a kernel from its JSON declaration.

    {"type": "constant", "order": n, "value": c}
    {"type": "product", "order": n, "terms": [{"coef": c, "factors": [{"name": ..., params}]}]}
    {"type": "default", "order": n, "name": "one" | "sum" | "cosine"}
    """
    kind = spec.get("type", "product")
    order = int(spec.get("order", 0))
    if kind == "constant":
        return constant_kernel(spec.get("value", 1.0), order, horizon)
    if kind == "default":
        kernels = default_kernels(order, horizon)
        if spec.get("name") not in kernels:
            raise KernelError(f"unknown default kernel {spec.get('name')!r}")
        return kernels[spec["name"]]
    if kind == "product":
        terms = []
        for term in spec.get("terms", []):
            factors = []
            for factor in term["factors"]:
                factor = dict(factor)
                factors.append(basis_function(factor.pop("name"), **factor))
            terms.append((term.get("coef", 1.0), tuple(factors)))
        return ProductBasisKernel(order, horizon, terms)
    raise KernelError(f"unknown kernel type {kind!r}")


def symmetrize(kernel):
    """
    Average a grid kernel over all permutations of its arguments.

    Symmetric input comes back unchanged, so symmetrize is idempotent.
    """
    values = kernel.values if isinstance(kernel, GridKernel) else np.asarray(kernel)
    if values.ndim > MAX_GRID_ORDER:
        raise OrderTooHigh(f"symmetrize supports order <= {MAX_GRID_ORDER}")
    grid = kernel.grid if isinstance(kernel, GridKernel) else None
    if grid is None:
        raise KernelError("symmetrize needs a GridKernel")
    return GridKernel(grid, values)


def _check_compatible(a, b):
    if a.order != b.order:
        raise OrderMismatch(f"orders {a.order} and {b.order} differ")
    if not math.isclose(a.horizon, b.horizon, rel_tol=1e-9):
        raise HorizonMismatch(f"horizons {a.horizon} and {b.horizon} differ")


def check_horizon(kernel, grid):
    if not math.isclose(kernel.horizon, grid.horizon, rel_tol=1e-9, abs_tol=1e-12):
        raise HorizonMismatch(f"kernel horizon {kernel.horizon} vs path horizon {grid.horizon}")


def kernel_inner(a, b, resolution=64):
    """
    L2([0, t]^n) inner product.

    Product-basis pairs are integrated exactly from 1-D quadratures, grid
    kernels by their cell sums, and other kernels with scipy's nquad (orders 1
    and 2) or a midpoint rule with `resolution` cells per axis.
    """
    _check_compatible(a, b)
    n, t = a.order, a.horizon
    if n == 0:
        return float(a()) * float(b())
    if isinstance(a, ProductBasisKernel) and isinstance(b, ProductBasisKernel):
        cache = {}

        def inner(f, g):
            key = (f, g) if (f, g) in cache or (g, f) not in cache else (g, f)
            if key not in cache:
                cache[key] = inner_1d(f, g, t)
            return cache[key]

        total = 0.0
        for ca, fa in a.terms:
            for cb, fb in b.terms:
                acc = 0.0
                for perm in permutations(fb):
                    acc += math.prod(inner(f, g) for f, g in zip(fa, perm))
                total += ca * cb * acc / math.factorial(n)
        return total
    for k in (a, b):
        if isinstance(k, GridKernel):
            return float(np.sum(a.cube(k.grid) * b.cube(k.grid)) * k.grid.dt ** n)
    if n <= 2:
        value, _ = integrate.nquad(
            lambda *x: float(a(*x)) * float(b(*x)), [(0.0, t)] * n, opts={"epsabs": 1e-11, "epsrel": 1e-10}
        )
        return value
    grid = TimeGrid(t, resolution)
    return float(np.sum(a.cube(grid) * b.cube(grid)) * grid.dt ** n)


def wiener_integrals(kernel, grid, increments, mode="iterated", last_mask=None):
    """
    Multiple Wiener integrals for each row of `increments`.

    Args:
        kernel: SymmetricKernel with the horizon of `grid`
        grid: TimeGrid of the increments
        increments: array (n_paths, n_steps)
        mode: "iterated" (strict-simplex sum) or "hermite" (product-basis closed form)
        last_mask: weights on the last increment of every simplex term

    Returns:
        array (n_paths,)
    """
    check_horizon(kernel, grid)
    if mode == "hermite":
        if not isinstance(kernel, ProductBasisKernel):
            raise KernelError("hermite mode needs a product-basis kernel")
        return kernel.hermite_integrals(grid, increments)
    if mode != "iterated":
        raise KernelError(f"unknown evaluation mode {mode!r}")
    return kernel.wiener_integrals(grid, increments, last_mask)


def multiple_wiener_integral(kernel, path, mode="iterated"):
    """I_n(a_n) along one path."""
    return float(wiener_integrals(kernel, path.grid, path.increments[None, :], mode)[0])
