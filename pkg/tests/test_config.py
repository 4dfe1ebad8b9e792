"""
Tests for experiment configs.
"""

import json
import os
import tempfile
import unittest
from unittest.mock import patch

from chaosflow import config
from chaosflow.barrier import ConstantBarrier, LinearBarrier
from chaosflow.config import ExperimentConfig, load_config, parse_config, resolve_threads
from chaosflow.errors import ConfigError


class TestParseConfig(unittest.TestCase):
    """Test validation of decoded configs."""

    def test_minimal_config(self):
        cfg = parse_config({"experiment": "alpha", "seed": 42})
        self.assertEqual(cfg.experiment, "alpha")
        self.assertEqual(cfg.seed, 42)
        self.assertEqual(cfg.n_paths, 10000)
        self.assertEqual(cfg.z_threshold, 3.0)
        self.assertEqual(cfg.grid("n_steps"), 1024)
        self.assertIsInstance(cfg.build_barrier(), ConstantBarrier)

    def test_grid_overrides_merge_with_defaults(self):
        cfg = parse_config({"experiment": "expand", "seed": 1, "grids": {"n_steps": 256}})
        self.assertEqual(cfg.grid("n_steps"), 256)
        self.assertEqual(cfg.grid("n_horizons"), 64)

    def test_missing_seed(self):
        with self.assertRaises(ConfigError):
            parse_config({"experiment": "alpha"})

    def test_missing_experiment(self):
        with self.assertRaises(ConfigError):
            parse_config({"seed": 1})

    def test_unknown_experiment(self):
        with self.assertRaises(ConfigError):
            parse_config({"experiment": "ping", "seed": 1})

    def test_unknown_key(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_config({"experiment": "alpha", "seed": 1, "n_path": 10})
        self.assertIn("n_path", str(ctx.exception))

    def test_bad_seeds(self):
        for seed in (-1, 1.5, "7", True):
            with self.assertRaises(ConfigError):
                parse_config({"experiment": "alpha", "seed": seed})

    def test_unknown_grid_key(self):
        with self.assertRaises(ConfigError):
            parse_config({"experiment": "alpha", "seed": 1, "grids": {"steps": 10}})

    def test_bad_n_paths_and_threshold(self):
        with self.assertRaises(ConfigError):
            parse_config({"experiment": "alpha", "seed": 1, "n_paths": 1})
        with self.assertRaises(ConfigError):
            parse_config({"experiment": "alpha", "seed": 1, "z_threshold": 0})

    def test_not_a_dict(self):
        with self.assertRaises(ConfigError):
            parse_config([1, 2])


class TestExperimentConfig(unittest.TestCase):
    """Test the builders of ExperimentConfig."""

    def test_linear_barrier(self):
        cfg = ExperimentConfig("alpha", 1, barrier={"kind": "linear", "level": 1.0, "slope": 0.5})
        barrier = cfg.build_barrier()
        self.assertIsInstance(barrier, LinearBarrier)
        self.assertAlmostEqual(barrier(1.0), 1.5)

    def test_bad_barrier(self):
        with self.assertRaises(ConfigError):
            ExperimentConfig("alpha", 1, barrier={"kind": "linear", "level": 1.0}).build_barrier()
        with self.assertRaises(ConfigError):
            ExperimentConfig("alpha", 1, barrier={"kind": "constant", "level": -1.0}).build_barrier()
        with self.assertRaises(ConfigError):
            ExperimentConfig("alpha", 1, barrier={"kind": "parabola"}).build_barrier()

    def test_default_kernels(self):
        kernels = ExperimentConfig("chaos-orth", 1).build_kernels()
        self.assertEqual(len(kernels), 9)
        second = ExperimentConfig("chaos-orth", 1).build_kernels(order=2)
        self.assertEqual(sorted(second), ["cosine2", "one2", "sum2"])
        self.assertTrue(all(k.order == 2 for k in second.values()))

    def test_declared_kernels(self):
        cfg = ExperimentConfig("chaos-orth", 1, kernels={
            "c": {"type": "constant", "order": 2, "value": 3.0},
            "e": {"type": "product", "order": 1,
                  "terms": [{"coef": 1.0, "factors": [{"name": "cosine_basis", "k": 1}]}]},
        })
        kernels = cfg.build_kernels(horizon=0.5)
        self.assertEqual(kernels["c"].order, 2)
        self.assertEqual(kernels["e"].horizon, 0.5)

    def test_bad_kernel(self):
        cfg = ExperimentConfig("chaos-orth", 1, kernels={"x": {"type": "wavelet", "order": 1}})
        with self.assertRaises(ConfigError):
            cfg.build_kernels()

    def test_function(self):
        cfg = ExperimentConfig("kv", 1, f={"name": "linear", "slope": 2.0})
        f = cfg.build_function()
        self.assertAlmostEqual(float(f(1.5)), 3.0)

    def test_missing_function(self):
        with self.assertRaises(ConfigError):
            ExperimentConfig("kv", 1).build_function()
        with self.assertRaises(ConfigError):
            ExperimentConfig("kv", 1, f={"name": "cubic"}).build_function()

    def test_to_dict(self):
        data = ExperimentConfig("alpha", 5).to_dict()
        self.assertEqual(data["seed"], 5)
        self.assertEqual(data["grids"]["pde_n_y"], 400)


class TestLoadConfig(unittest.TestCase):
    """Test reading config files."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def _write(self, text):
        path = os.path.join(self.tmp.name, "config.json")
        with open(path, "w") as handle:
            handle.write(text)
        return path

    def test_load(self):
        path = self._write(json.dumps({"experiment": "kv", "seed": 3, "f": {"name": "square"}}))
        cfg = load_config(path)
        self.assertEqual(cfg.experiment, "kv")
        self.assertEqual(cfg.f, {"name": "square"})

    def test_missing_file(self):
        with self.assertRaises(ConfigError):
            load_config(os.path.join(self.tmp.name, "nope.json"))

    def test_invalid_json(self):
        with self.assertRaises(ConfigError):
            load_config(self._write("{not json"))

    def test_shipped_configs(self):
        root = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")
        found = set()
        for name in sorted(os.listdir(root)):
            cfg = load_config(os.path.join(root, name))
            self.assertEqual(cfg.experiment + ".json", name)
            cfg.build_barrier()
            found.add(cfg.experiment)
        self.assertEqual(found, set(config.EXPERIMENTS))


class TestResolveThreads(unittest.TestCase):
    """Test the worker count precedence."""

    def test_flag_wins(self):
        with patch.dict(os.environ, {config.THREADS_ENV: "3"}):
            self.assertEqual(resolve_threads(5, ExperimentConfig("alpha", 1, threads=2)), 5)

    def test_environment_before_config(self):
        with patch.dict(os.environ, {config.THREADS_ENV: "3"}):
            self.assertEqual(resolve_threads(None, ExperimentConfig("alpha", 1, threads=2)), 3)

    def test_config_then_default(self):
        with patch.dict(os.environ, {}, clear=True):
            self.assertEqual(resolve_threads(None, ExperimentConfig("alpha", 1, threads=2)), 2)
            self.assertEqual(resolve_threads(), 1)

    def test_bad_values(self):
        with patch.dict(os.environ, {config.THREADS_ENV: "many"}):
            with self.assertRaises(ConfigError):
                resolve_threads()
        with self.assertRaises(ConfigError):
            resolve_threads(0)


if __name__ == '__main__':
    unittest.main()
