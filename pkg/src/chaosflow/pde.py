"""
Theta-scheme solver for backward parabolic problems on a uniform space grid.

    u_s + 1/2 u_zz + c(s, z) u_z = 0,    s < t,    u(t, .) given,

with a homogeneous Neumann condition at the lower end and either a Dirichlet
value or a Neumann condition at the upper end. Crank-Nicolson (theta = 1/2) by
default; the first steps after a rough terminal condition can be replaced by
implicit Euler half steps (Rannacher start).
"""

import logging

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .errors import InvalidGrid

logger = logging.getLogger(__name__)


class BackwardSolver:
    """
    Backward theta scheme on the grid `z`.

    Args:
        z: increasing uniform grid (numpy array)
        upper: "dirichlet" or "neumann" condition at z[-1]
        upper_value: Dirichlet value at z[-1]
        peclet: cell Peclet number |c| dz above which the convection term is
            upwinded instead of centered
    """

    def __init__(self, z, upper="dirichlet", upper_value=0.0, peclet=1.0):
        z = np.asarray(z, dtype=float)
        if z.ndim != 1 or z.size < 3:
            raise InvalidGrid("space grid needs at least 3 points")
        dz = np.diff(z)
        if np.any(dz <= 0) or not np.allclose(dz, dz[0], rtol=1e-9, atol=0.0):
            raise InvalidGrid("space grid must be uniform and increasing")
        if upper not in ("dirichlet", "neumann"):
            raise ValueError(f"unknown upper boundary condition {upper!r}")
        self.z = z
        self.dz = float(dz[0])
        self.upper = upper
        self.upper_value = float(upper_value)
        self.peclet = peclet
        self._cache = {}

    @property
    def size(self):
        return self.z.size

    def operator_diagonals(self, c):
        """Diagonals (lower, main, upper) of the discrete 1/2 d2/dz2 + c d/dz."""
        n = self.size
        dz = self.dz
        c = np.broadcast_to(np.asarray(c, dtype=float), (n,)).copy()
        c[0] = 0.0
        c[-1] = 0.0

        lower = np.full(n - 1, 0.5 / dz**2)
        main = np.full(n, -1.0 / dz**2)
        upper = np.full(n - 1, 0.5 / dz**2)

        centered = np.abs(c) * dz <= self.peclet
        inner = np.arange(1, n - 1)
        cj = c[inner]
        cen = centered[inner]
        # lower[j-1] multiplies u_{j-1} in row j, upper[j] multiplies u_{j+1}
        lower[inner - 1] += np.where(cen, -cj / (2 * dz), np.where(cj < 0, -cj / dz, 0.0))
        upper[inner] += np.where(cen, cj / (2 * dz), np.where(cj > 0, cj / dz, 0.0))
        main[inner] += np.where(cen, 0.0, -np.abs(cj) / dz)

        # Neumann ghost point u_{-1} = u_1
        upper[0] = 1.0 / dz**2
        if self.upper == "neumann":
            lower[-1] = 1.0 / dz**2
        else:
            lower[-1] = 0.0
            main[-1] = 0.0
        return lower, main, upper

    def step_operators(self, c, ds, theta):
        """
        Matrices of one backward step: u(s) = lu.solve(B @ u(s+ds) + b).

        Returns:
            (lu, B, b) with lu a scipy SuperLU factorization of A
        """
        key = None
        if np.ndim(c) == 0:
            key = (float(c), float(ds), float(theta))
            if key in self._cache:
                return self._cache[key]
        lower, main, upper = self.operator_diagonals(c)
        n = self.size
        a_main = 1.0 - theta * ds * main
        b_main = 1.0 + (1.0 - theta) * ds * main
        if self.upper == "dirichlet":
            b_main[-1] = 0.0
        A = sparse.diags([-theta * ds * lower, a_main, -theta * ds * upper], [-1, 0, 1], format="csc")
        B = sparse.diags(
            [(1.0 - theta) * ds * lower, b_main, (1.0 - theta) * ds * upper], [-1, 0, 1], format="csr"
        )
        b = np.zeros(n)
        if self.upper == "dirichlet":
            b[-1] = self.upper_value
        ops = (splu(A), B, b)
        if key is not None:
            self._cache[key] = ops
        return ops

    def step(self, u, c, ds, theta=0.5):
        lu, B, b = self.step_operators(c, ds, theta)
        return lu.solve(B @ u + b)

    def solve(self, terminal, s_grid, drift=None, rannacher=0):
        """
        March from s_grid[-1] back to s_grid[0].

        Args:
            terminal: values at s_grid[-1]
            s_grid: increasing times
            drift: callable s -> c(s, z) on the grid, or None for c = 0;
                evaluated at step midpoints
            rannacher: number of steps (next to the terminal time) replaced by
                two implicit Euler half steps

        Returns:
            array (len(s_grid), len(z)), row i holding u(s_grid[i], .)
        """
        s_grid = np.asarray(s_grid, dtype=float)
        table = np.empty((s_grid.size, self.size))
        table[-1] = terminal
        u = np.asarray(terminal, dtype=float)
        for k, n in enumerate(range(s_grid.size - 2, -1, -1)):
            ds = s_grid[n + 1] - s_grid[n]
            s_mid = s_grid[n] + 0.5 * ds
            c = 0.0 if drift is None else drift(s_mid)
            if k < rannacher:
                u = self.step(u, c, 0.5 * ds, theta=1.0)
                u = self.step(u, c, 0.5 * ds, theta=1.0)
            else:
                u = self.step(u, c, ds)
            table[n] = u
        if not np.all(np.isfinite(table)):
            logger.warning("non-finite values in backward solve on %d x %d grid", s_grid.size, self.size)
        logger.debug("backward solve done: %d time steps, %d space points", s_grid.size - 1, self.size)
        return table
