"""
Tests for Hermite polynomials, symmetric kernels and multiple Wiener integrals.
"""

import math
import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from chaosflow import chaos
from chaosflow.chaos import GridKernel, ProductBasisKernel, basis_function, constant_kernel, default_kernels
from chaosflow.errors import HorizonMismatch, KernelError, OrderMismatch, OrderTooHigh
from chaosflow.montecarlo import from_samples
from chaosflow.paths import TimeGrid, sample_brownian, sample_brownian_ensemble


class TestHermite(unittest.TestCase):
    """Test probabilists' Hermite polynomials."""

    def test_low_degrees(self):
        x = np.array([-1.5, 0.0, 0.7, 2.0])
        assert_allclose(chaos.hermite(0, x), 1.0)
        assert_allclose(chaos.hermite(1, x), x)
        assert_allclose(chaos.hermite(2, x), x ** 2 - 1)
        assert_allclose(chaos.hermite(3, x), x ** 3 - 3 * x)
        self.assertEqual(chaos.hermite(4, 0.0), 3.0)

    def test_negative_degree(self):
        with self.assertRaises(ValueError):
            chaos.hermite(-1, 0.5)

    def test_shift_identity(self):
        for n in range(7):
            self.assertLess(chaos.hermite_shift_check(n, 0.3, -0.7), 1e-10)

    def test_shift_identity_random_points(self):
        rng = np.random.default_rng(2024)
        for n in range(9):
            for x, y in rng.uniform(-3.0, 3.0, size=(50, 2)):
                self.assertLess(chaos.hermite_shift_check(n, x, y), 1e-9, (n, x, y))
        self.assertEqual(chaos.hermite_shift_check(2, 1.0, 1.0), 0.0)


class TestIteratedSums(unittest.TestCase):
    """Test the strict-simplex sums."""

    def test_product_matches_dense(self):
        grid = TimeGrid(1.0, 16)
        batch = sample_brownian_ensemble(grid, 5, 1)
        f1 = np.cos(grid.midpoints)
        f2 = grid.midpoints ** 2
        dense = chaos.simplex_sum(np.multiply.outer(f1, f2), batch.increments)
        linear = chaos.iterated_product([f1, f2], batch.increments)
        assert_allclose(dense, linear, rtol=1e-10, atol=1e-12)

    def test_mask_shape(self):
        mask = chaos.strict_simplex_mask(4, 3)
        self.assertEqual(mask.sum(), 4)
        self.assertTrue(mask[0, 1, 2])
        self.assertFalse(mask[1, 1, 2])


class TestKernels(unittest.TestCase):
    """Test kernel representations."""

    def test_constant_kernel_integrals(self):
        grid = TimeGrid(1.0, 64)
        path = sample_brownian(grid, 3)
        w = path.values[-1]
        self.assertAlmostEqual(chaos.multiple_wiener_integral(constant_kernel(1.0, 1), path), w, places=12)
        second = chaos.multiple_wiener_integral(constant_kernel(1.0, 2), path)
        self.assertAlmostEqual(second, w ** 2 - np.sum(path.increments ** 2), places=10)
        self.assertEqual(chaos.multiple_wiener_integral(constant_kernel(2.5, 0), path), 2.5)

    def test_product_kernel_is_symmetric(self):
        k = ProductBasisKernel(2, 1.0, [(1.0, (basis_function("monomial", power=1), basis_function("constant")))])
        self.assertAlmostEqual(k(0.2, 0.7), k(0.7, 0.2))
        self.assertAlmostEqual(k(0.2, 0.7), 0.45)

    def test_factor_count(self):
        with self.assertRaises(KernelError):
            ProductBasisKernel(2, 1.0, [(1.0, (basis_function("constant"),))])
        with self.assertRaises(KernelError):
            basis_function("wavelet")

    def test_grid_kernel_symmetrized(self):
        grid = TimeGrid(1.0, 4)
        values = np.arange(16.0).reshape(4, 4)
        k = GridKernel(grid, values)
        assert_allclose(k.values, k.values.T)
        assert_array_equal(chaos.symmetrize(k).values, k.values)
        with self.assertRaises(KernelError):
            GridKernel(grid, np.zeros((3, 3)))
        with self.assertRaises(OrderTooHigh):
            GridKernel(TimeGrid(1.0, 2), np.zeros((2,) * 5))

    def test_grid_kernel_on_finer_path(self):
        coarse = TimeGrid(1.0, 8)
        fine = TimeGrid(1.0, 64)
        k = GridKernel(coarse, np.ones((8, 8)))
        batch = sample_brownian_ensemble(fine, 3, 2)
        sums = batch.increments.reshape(3, 8, 8).sum(axis=2)
        expected = sums.sum(axis=1) ** 2 - np.sum(sums ** 2, axis=1)
        assert_allclose(k.wiener_integrals(fine, batch.increments), expected, atol=1e-10)

    def test_slices(self):
        k = constant_kernel(1.0, 2)
        sl = k.slice(0.5)
        self.assertEqual(sl.order, 1)
        self.assertEqual(sl.horizon, 0.5)
        self.assertAlmostEqual(float(sl(0.2)), 1.0)
        grid_kernel = GridKernel(TimeGrid(1.0, 8), np.ones((8, 8)))
        self.assertEqual(grid_kernel.slice(0.5).grid.n_steps, 4)
        with self.assertRaises(HorizonMismatch):
            grid_kernel.slice(0.3)
        with self.assertRaises(OrderMismatch):
            constant_kernel(1.0, 0).slice(0.5)

    def test_from_dict(self):
        k = chaos.kernel_from_dict({"type": "default", "order": 2, "name": "cosine"})
        self.assertEqual(k.order, 2)
        k = chaos.kernel_from_dict({"type": "constant", "order": 1, "value": 2.0})
        self.assertAlmostEqual(float(k(0.3)), 2.0)
        with self.assertRaises(KernelError):
            chaos.kernel_from_dict({"type": "default", "order": 1, "name": "spline"})
        with self.assertRaises(KernelError):
            chaos.kernel_from_dict({"type": "wavelet", "order": 1})


class TestInnerProducts(unittest.TestCase):
    """Test L2 inner products of kernels."""

    def test_product_basis(self):
        kernels = default_kernels(2)
        self.assertAlmostEqual(chaos.kernel_inner(kernels["one"], kernels["one"]), 1.0, places=10)
        self.assertAlmostEqual(chaos.kernel_inner(kernels["sum"], kernels["sum"]), 7.0 / 6.0, places=10)
        self.assertAlmostEqual(chaos.kernel_inner(kernels["cosine"], kernels["cosine"]), 1.0, places=8)
        self.assertAlmostEqual(chaos.kernel_inner(kernels["one"], kernels["cosine"]), 0.0, places=8)

    def test_grid_kernel(self):
        k = GridKernel(TimeGrid(1.0, 8), np.full((8, 8), 2.0))
        self.assertAlmostEqual(chaos.kernel_inner(k, k), 4.0)

    def test_mismatch(self):
        with self.assertRaises(OrderMismatch):
            chaos.kernel_inner(constant_kernel(1.0, 1), constant_kernel(1.0, 2))
        with self.assertRaises(HorizonMismatch):
            chaos.kernel_inner(constant_kernel(1.0, 1), constant_kernel(1.0, 1, 0.5))


class TestWienerIntegrals(unittest.TestCase):
    """Test evaluation modes and the isometry."""

    def test_horizon_mismatch(self):
        grid = TimeGrid(0.5, 8)
        with self.assertRaises(HorizonMismatch):
            chaos.wiener_integrals(constant_kernel(1.0, 1), grid, np.zeros((1, 8)))

    def test_hermite_mode_requires_orthonormal_product(self):
        grid = TimeGrid(1.0, 8)
        dw = np.zeros((1, 8))
        with self.assertRaises(KernelError):
            chaos.wiener_integrals(default_kernels(2)["sum"], grid, dw, mode="hermite")
        with self.assertRaises(KernelError):
            chaos.wiener_integrals(GridKernel(grid, np.ones((8, 8))), grid, dw, mode="hermite")
        with self.assertRaises(KernelError):
            chaos.wiener_integrals(constant_kernel(1.0, 1), grid, dw, mode="exact")

    def test_hermite_mode_close_to_iterated(self):
        grid = TimeGrid(1.0, 512)
        batch = sample_brownian_ensemble(grid, 200, 6)
        k = default_kernels(2)["cosine"]
        self.assertTrue(k.orthonormal())
        iterated = chaos.wiener_integrals(k, grid, batch.increments)
        closed = chaos.wiener_integrals(k, grid, batch.increments, mode="hermite")
        self.assertLess(np.mean(np.abs(iterated - closed)), 0.2)

    def test_isometry(self):
        grid = TimeGrid(1.0, 64)
        batch = sample_brownian_ensemble(grid, 4000, 12)
        for name, k in default_kernels(2).items():
            values = chaos.wiener_integrals(k, grid, batch.increments)
            est = from_samples(values ** 2)
            norm = math.factorial(2) * chaos.kernel_inner(k, k)
            self.assertLess(abs(est.mean - norm), 5 * est.stderr + 0.05 * norm, name)


if __name__ == '__main__':
    unittest.main()
