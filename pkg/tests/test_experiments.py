"""
Tests for the experiment runners.
"""

import math
import unittest

from chaosflow import experiments
from chaosflow.config import EXPERIMENTS, parse_config
from chaosflow.errors import ConfigError


class TestRunners(unittest.TestCase):
    """Test runner dispatch and small end-to-end runs."""

    def test_every_experiment_has_a_runner(self):
        self.assertEqual(set(experiments.RUNNERS), set(EXPERIMENTS))

    def test_coefficients_need_constant_barrier(self):
        config = parse_config({"experiment": "coefficients", "seed": 1,
                               "barrier": {"kind": "linear", "level": 1.0, "slope": 0.5}})
        with self.assertRaises(ConfigError):
            experiments.run_coefficients(config)

    def test_kv_needs_function(self):
        config = parse_config({"experiment": "kv", "seed": 1})
        with self.assertRaises(ConfigError):
            experiments.run_kv(config)

    def test_alpha_without_monte_carlo(self):
        config = parse_config({
            "experiment": "alpha", "seed": 1,
            "grids": {"pde_n_s": 200, "pde_n_y": 200},
            "params": {"monte_carlo": False, "tolerance": 3e-3},
        })
        result = experiments.run_alpha(config)
        self.assertAlmostEqual(result["values"]["alpha_0_0"], math.erf(1.0 / math.sqrt(2.0)), delta=3e-3)
        names = [t["name"] for t in result["tests"]]
        self.assertIn("alpha_pde_vs_closed_form", names)
        self.assertIn("monotone_limit", names)
        self.assertIn("survival_field.csv", result["tables"])

    def test_kv_without_drift(self):
        config = parse_config({
            "experiment": "kv", "seed": 5, "n_paths": 2000, "f": {"name": "square"},
            "grids": {"n_steps": 64, "pde_n_y": 200},
            "params": {"drift": "zero", "n_lattice": 16, "max_order": 2},
        })
        result = experiments.run_kv(config)
        by_name = {t["name"]: t for t in result["tests"]}
        self.assertTrue(by_name["chapman_kolmogorov"]["pass"])
        self.assertTrue(by_name["kv_decrease[2]"]["pass"])
        self.assertIn("feynman_kac", by_name)
        self.assertNotIn("bridge_projection", result["values"])

    def test_clark_verify_small(self):
        config = parse_config({"experiment": "clark-verify", "seed": 3, "n_paths": 300,
                               "params": {"levels": [6, 7]}})
        result = experiments.run_clark_verify(config)
        names = [t["name"] for t in result["tests"]]
        for name in ("clark_mean[2^6]", "survival_martingale[2^7]", "clark_correlation[2^7]",
                     "clark_residual_decreasing"):
            self.assertIn(name, names)
        rows = result["tables"]["clark_residuals.csv"]
        self.assertEqual([row["n_steps"] for row in rows], [64, 128])
        self.assertAlmostEqual(result["values"]["alpha_0_0"], math.erf(1.0 / math.sqrt(2.0)), places=10)

    def test_chaos_orth_small(self):
        config = parse_config({"experiment": "chaos-orth", "seed": 4, "n_paths": 200, "grids": {"n_steps": 32}})
        result = experiments.run_chaos_orth(config)
        by_name = {t["name"]: t for t in result["tests"]}
        self.assertTrue(by_name["hermite_shift"]["pass"])
        for name in ("hermite_norm[3]", "wiener_isometry[one2]", "t=0.5:kappa_isometry[one1]",
                     "t=1:kappa_isometry[cosine3]", "t=1:kappa_orthogonal[one1,one2]"):
            self.assertIn(name, by_name)
        self.assertEqual(set(result["tables"]), {"wiener_norms.csv", "kappa_norms_t0.5.csv", "kappa_norms_t1.csv"})
        for test in result["tests"]:
            self.assertTrue(math.isfinite(test["estimate"]), test["name"])

    def test_girsanov_check_small(self):
        config = parse_config({"experiment": "girsanov-check", "seed": 6, "n_paths": 200,
                               "grids": {"n_steps": 32}, "params": {"export_paths": 3}})
        result = experiments.run_girsanov_check(config)
        by_name = {t["name"]: t for t in result["tests"]}
        self.assertTrue(by_name["paths_below_barrier"]["pass"])
        self.assertTrue(by_name["transform_injective"]["pass"])
        for name in ("quadratic_variation", "rejection_acceptance", "methods_ks_end_value", "methods_expected_max"):
            self.assertIn(name, by_name)
        self.assertEqual(sum(name.startswith("pushforward_variance") for name in by_name), 5)
        self.assertEqual(len(result["tables"]["conditioned_paths.csv"]), 3 * 33)
        self.assertEqual(len(result["tables"]["transformed_paths.csv"]), 3 * 33)

    def test_expand_small(self):
        config = parse_config({
            "experiment": "expand", "seed": 7, "n_paths": 200,
            "grids": {"n_steps": 32, "n_horizons": 8},
            "params": {"orders": [1, 2], "conditioning_orders": [1], "transform_n_steps": 256,
                       "transform_paths": 20},
        })
        result = experiments.run_expand(config)
        by_name = {t["name"]: t for t in result["tests"]}
        self.assertTrue(by_name["parseval_first_order_exact"]["pass"])
        for name in ("nu_norm[one1]", "nu_norm[sum2]", "nu_orthogonal[one1,one2]", "parseval_energy[2]",
                     "parseval_bessel", "transformed_path[n=1][one1]", "compensated_form[n=2][one2]"):
            self.assertIn(name, by_name)
        self.assertEqual([row["order"] for row in result["tables"]["parseval.csv"]], [0, 1, 2])
        self.assertIn("max_compensated_gap[one2]", result["values"])

    def test_coefficients_small(self):
        config = parse_config({"experiment": "coefficients", "seed": 8, "n_paths": 500,
                               "grids": {"n_steps": 32}, "params": {"n_bins": 4}})
        result = experiments.run_coefficients(config)
        rows = result["tables"]["coefficients.csv"]
        self.assertEqual(len(rows), 4)
        self.assertAlmostEqual(rows[0]["t_start"], 0.0)
        self.assertAlmostEqual(rows[-1]["t_end"], 1.0)
        names = [t["name"] for t in result["tests"]]
        self.assertIn("a1[0.000,0.250]", names)
        self.assertIn("representations_differ", names)


if __name__ == '__main__':
    unittest.main()
