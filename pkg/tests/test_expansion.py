"""
Tests for the compensated operators and the stopped-flow expansion.
"""

import math
import unittest
from unittest.mock import patch

import numpy as np
from numpy.testing import assert_allclose
from scipy import integrate

from chaosflow import expansion
from chaosflow.barrier import ConstantBarrier, FlatSurvival, PiecewiseLinearBarrier, survival_model
from chaosflow.chaos import GridKernel, constant_kernel, default_kernels
from chaosflow.errors import HorizonMismatch, InvalidGrid, OrderMismatch, OrderTooHigh, TGridTooCoarse
from chaosflow.expansion import FieldFamily, KernelFamily
from chaosflow.girsanov import DriftField, sample_conditioned_ensemble
from chaosflow.paths import TimeGrid, batch_first_passage, sample_brownian_ensemble, stop_values


def _field(level=1.0, horizon=1.0):
    return DriftField(survival_model(ConstantBarrier(level, horizon), horizon))


class TestKappaIntegrals(unittest.TestCase):
    """Test I^kappa under the conditioned law."""

    def setUp(self):
        self.grid = TimeGrid(1.0, 64)

    def test_flat_field_gives_wiener_integrals(self):
        batch = sample_brownian_ensemble(self.grid, 10, 3)
        flat = DriftField(FlatSurvival(1.0))
        for k in default_kernels(2).values():
            assert_allclose(
                expansion.kappa_integrals(k, self.grid, batch.values, flat),
                k.wiener_integrals(self.grid, batch.increments),
                rtol=1e-10, atol=1e-10,
            )

    def test_first_order_forms_agree(self):
        field = _field()
        batch = sample_conditioned_ensemble(field, self.grid, 20, 5)
        k = default_kernels(1)["sum"]
        assert_allclose(
            expansion.kappa_integrals(k, self.grid, batch.values, field),
            expansion.compensated_integrals(k, self.grid, batch.values, field),
            rtol=1e-9, atol=1e-9,
        )

    def test_first_order_constant_kernel(self):
        field = _field()
        batch = sample_conditioned_ensemble(field, self.grid, 5, 6)
        path = batch.path(2)
        drift = field.drift(self.grid.times[:-1], path.values[:-1])
        expected = path.values[-1] - np.sum(drift) * self.grid.dt
        self.assertAlmostEqual(expansion.I_kappa(1, constant_kernel(1.0, 1), path, field), expected, places=10)

    def test_grid_kernel_matches_product_kernel(self):
        field = _field()
        batch = sample_conditioned_ensemble(field, self.grid, 4, 8)
        k = constant_kernel(1.0, 2)
        dense = GridKernel(self.grid, np.ones((64, 64)))
        assert_allclose(
            expansion.kappa_integrals(dense, self.grid, batch.values, field),
            expansion.kappa_integrals(k, self.grid, batch.values, field),
            rtol=1e-9, atol=1e-9,
        )

    def test_order_checks(self):
        field = _field()
        path = sample_conditioned_ensemble(field, self.grid, 1, 0).path(0)
        with self.assertRaises(OrderMismatch):
            expansion.I_kappa(2, constant_kernel(1.0, 1), path, field)
        with self.assertRaises(OrderMismatch):
            expansion.I_kappa_compensated_form(1, constant_kernel(1.0, 2), path, field)
        with self.assertRaises(OrderTooHigh):
            expansion.kappa_integrals(GridKernel(TimeGrid(1.0, 4), np.ones((4,) * 4)), TimeGrid(1.0, 4),
                                      np.zeros((1, 5)), field)

    def test_isometry(self):
        field = _field()
        kernels = {"one1": constant_kernel(1.0, 1), "one2": constant_kernel(1.0, 2)}
        tests, rows = expansion.kappa_suite(field, kernels, TimeGrid(1.0, 512), 4000, 14, threshold=4.0)
        self.assertEqual(len(rows), 2)
        names = {t["name"] for t in tests}
        self.assertIn("kappa_isometry[one2]", names)
        self.assertIn("kappa_orthogonal[one1,one2]", names)
        for row in rows:
            self.assertLess(abs(row["estimate"] - row["oracle"]), 5 * row["stderr"], row)


class TestKernelFamily(unittest.TestCase):
    """Test slices and induced kernels."""

    def test_constant_kernel_slices(self):
        family = KernelFamily.from_kernel(constant_kernel(1.0, 2))
        sl = family.slice_at(0.5)
        self.assertEqual(sl.order, 1)
        self.assertAlmostEqual(float(sl(0.25)), 1.0)

    def test_induced_kernel(self):
        family = KernelFamily.from_kernel(constant_kernel(1.0, 2))
        induced = family.induced_kernel(TimeGrid(1.0, 8))
        self.assertAlmostEqual(induced.values[0, 1], 1.0)
        self.assertAlmostEqual(induced.values[5, 2], 1.0)
        self.assertEqual(induced.values[3, 3], 0.0)

    def test_from_slices(self):
        slices = {0.5: constant_kernel(1.0, 1, 0.5), 1.0: constant_kernel(2.0, 1, 1.0)}
        family = KernelFamily.from_slices(slices)
        self.assertEqual(family.order, 2)
        assert_allclose(family.knots, [0.5, 1.0])
        self.assertAlmostEqual(float(family.slice_at(0.75)(0.1)), 1.0)
        with self.assertRaises(OrderMismatch):
            KernelFamily.from_slices({0.5: constant_kernel(1.0, 1, 0.5), 1.0: constant_kernel(1.0, 2)})
        with self.assertRaises(HorizonMismatch):
            KernelFamily.from_slices({0.5: constant_kernel(1.0, 1, 1.0)})
        with self.assertRaises(OrderMismatch):
            KernelFamily(0, lambda h: [])


class TestNuIntegrals(unittest.TestCase):
    """Test the stopped-flow operator I^nu."""

    def setUp(self):
        self.grid = TimeGrid(1.0, 64)
        self.barrier = ConstantBarrier(1.0)
        self.batch = sample_brownian_ensemble(self.grid, 50, 2)
        self.hits = batch_first_passage(self.batch, self.barrier, "bridge")

    def test_first_order_constant_is_stopped_end(self):
        family = KernelFamily.from_kernel(constant_kernel(1.0, 1))
        values = expansion.nu_integrals(family, self.batch, self.hits)
        assert_allclose(values, stop_values(self.batch.values, self.hits)[:, -1], atol=1e-12)
        single = expansion.I_nu(1, family, self.batch.path(4), self.hits.result(4))
        self.assertAlmostEqual(single, values[4], places=12)

    def test_second_order_needs_fields(self):
        family = KernelFamily.from_kernel(constant_kernel(1.0, 2))
        with self.assertRaises(ValueError):
            expansion.nu_integrals(family, self.batch, self.hits)
        with self.assertRaises(OrderMismatch):
            expansion.I_nu(1, family, self.batch.path(0), self.hits.result(0))

    def test_horizon_spacing(self):
        fields = FieldFamily.from_barrier(self.barrier, self.grid, 4)
        family = KernelFamily.from_kernel(constant_kernel(1.0, 2))
        with self.assertRaises(TGridTooCoarse):
            expansion.nu_integrals(family, self.batch, self.hits, fields, max_spacing=0.1)
        values = expansion.nu_integrals(family, self.batch, self.hits, fields, max_spacing=0.25)
        self.assertEqual(values.shape, (50,))
        self.assertTrue(np.all(np.isfinite(values)))

    def test_norm_oracle_first_order(self):
        family = KernelFamily.from_kernel(constant_kernel(1.0, 1))
        survival = expansion.survival_curve(self.barrier)
        oracle = expansion.nu_norm_oracle(family, TimeGrid(1.0, 256), survival)
        exact, _ = integrate.quad(lambda t: math.erf(1.0 / math.sqrt(2.0 * t)) if t > 0 else 1.0, 0.0, 1.0)
        self.assertAlmostEqual(oracle, exact, delta=1e-3)

    def test_nu_suite(self):
        grid = TimeGrid(1.0, 64)
        fields = FieldFamily.from_barrier(self.barrier, grid, 16)
        kernels = {"one1": constant_kernel(1.0, 1), "one2": constant_kernel(1.0, 2)}
        tests, rows = expansion.nu_suite(self.barrier, kernels, grid, 2000, 3, fields, iso_threshold=5.0)
        by_name = {t["name"]: t for t in tests}
        self.assertTrue(by_name["nu_sandwich_oracle[one1]"]["pass"])
        self.assertTrue(by_name["nu_sandwich_oracle[one2]"]["pass"])
        self.assertTrue(by_name["nu_norm[one1]"]["pass"])
        self.assertIn("nu_orthogonal[one1,one2]", by_name)
        self.assertEqual([r["order"] for r in rows], [1, 2])


class TestFieldFamily(unittest.TestCase):
    """Test drift fields over horizons."""

    def test_horizons(self):
        grid = TimeGrid(1.0, 64)
        fields = FieldFamily.from_barrier(ConstantBarrier(1.0), grid, 8)
        self.assertEqual(len(fields), 8)
        assert_allclose(fields.horizons, np.arange(1, 9) / 8)
        self.assertEqual(fields.survival(0.0), 1.0)
        self.assertAlmostEqual(float(fields.survival(1.0)), math.erf(1.0 / math.sqrt(2.0)), places=10)

    def test_bad_subsampling(self):
        with self.assertRaises(InvalidGrid):
            FieldFamily.from_barrier(ConstantBarrier(1.0), TimeGrid(1.0, 64), 5)

    def test_survival_curve_needs_fields(self):
        with self.assertRaises(ValueError):
            expansion.survival_curve(PiecewiseLinearBarrier([0.0, 1.0], [1.0, 2.0]))


class TestStudies(unittest.TestCase):
    """Test the conditioning, coefficient and Parseval studies."""

    def setUp(self):
        self.grid = TimeGrid(1.0, 64)
        self.barrier = ConstantBarrier(1.0)

    def test_conditioning_first_order(self):
        report = expansion.conditioning_check(1, constant_kernel(1.0, 1), self.grid, self.barrier, 3000, 4,
                                              threshold=4.5)
        self.assertEqual(report["order"], 1)
        self.assertEqual(len(report["tests"]), 6)
        self.assertTrue(report["all_pass"])

    def test_conditioning_order_limits(self):
        with self.assertRaises(OrderTooHigh):
            expansion.conditioning_check(4, constant_kernel(1.0, 4), self.grid, self.barrier, 100, 0)
        with self.assertRaises(OrderMismatch):
            expansion.conditioning_check(2, constant_kernel(1.0, 1), self.grid, self.barrier, 100, 0)

    def test_parseval_first_order_is_exact(self):
        report = expansion.parseval_study(self.barrier, self.grid, 500, 2, {1: {"one1": constant_kernel(1.0, 1)}})
        self.assertTrue(report["all_pass"])
        self.assertEqual([row["order"] for row in report["rows"]], [0, 1])
        self.assertLess(report["rows"][1]["residual"], 1e-10)
        names = [t["name"] for t in report["tests"]]
        self.assertEqual(names, ["parseval_energy[1]", "parseval_bessel", "parseval_first_order_exact"])
        row = report["rows"][1]
        self.assertLess(abs(row["energy"] - row["chaos_energy"]), 3 * row["chaos_energy_stderr"])

    def test_parseval_energy_uses_oracle_norms(self):
        oracle = expansion.nu_norm_oracle
        kernels = {1: {"one1": constant_kernel(1.0, 1)}}
        with patch("chaosflow.expansion.nu_norm_oracle", side_effect=lambda *a, **k: 2.0 * oracle(*a, **k)):
            report = expansion.parseval_study(self.barrier, self.grid, 500, 2, kernels)
        by_name = {t["name"]: t for t in report["tests"]}
        self.assertFalse(by_name["parseval_energy[1]"]["pass"])
        self.assertFalse(report["all_pass"])

    def test_nu_gram_polarization(self):
        kernels = default_kernels(1)
        survival = expansion.survival_curve(self.barrier)
        gram = expansion.nu_gram(kernels, self.grid, survival)
        self.assertEqual(gram.shape, (3, 3))
        assert_allclose(gram, gram.T)
        for i, k in enumerate(kernels.values()):
            self.assertAlmostEqual(
                gram[i, i], expansion.nu_norm_oracle(KernelFamily.from_kernel(k), self.grid, survival), places=12)
        self.assertTrue(np.all(np.linalg.eigvalsh(gram) > 0.0))

    def test_coefficient_representations_differ(self):
        report = expansion.coefficient_recovery_example(self.grid, 2000, 6, n_bins=4)
        self.assertEqual(len(report["rows"]), 4)
        by_name = {t["name"]: t for t in report["tests"]}
        self.assertTrue(by_name["representations_differ"]["pass"])
        with self.assertRaises(InvalidGrid):
            expansion.coefficient_recovery_example(self.grid, 10, 0, n_bins=5)

    def test_transformed_path_second_order(self):
        report = expansion.transformed_path_study(constant_kernel(1.0, 2), _field(), TimeGrid(1.0, 4096), 200, 21)
        self.assertEqual(report["order"], 2)
        self.assertLess(report["max_compensated_gap"], 1e-2)
        self.assertEqual(report["compensated_fraction"], 1.0)
        names = [t["name"] for t in report["tests"]]
        self.assertEqual(names, ["transformed_path[n=2]", "compensated_form[n=2]"])

    def test_alive_mask(self):
        hits = batch_first_passage(sample_brownian_ensemble(self.grid, 30, 1), self.barrier)
        mask = expansion.alive_mask(hits, self.grid.n_steps)
        self.assertEqual(mask.shape, (30, 64))
        for k in np.flatnonzero(hits.hit):
            self.assertEqual(mask[k, hits.crossing_index[k]], 1.0)
            if hits.crossing_index[k] + 1 < 64:
                self.assertEqual(mask[k, hits.crossing_index[k] + 1], 0.0)


if __name__ == '__main__':
    unittest.main()
