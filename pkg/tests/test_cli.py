"""
Tests for CLI argument parsing and exit codes.
"""

import io
import unittest
from unittest.mock import patch
import sys
from chaosflow import cli
from chaosflow.config import ExperimentConfig
from chaosflow.errors import ConfigError, RejectionBudgetExceeded


def _report(all_pass=True):
    return {
        "experiment": "alpha",
        "all_pass": all_pass,
        "failed": [] if all_pass else ["alpha_bridge_mc"],
    }


class TestCLI(unittest.TestCase):
    """Test command-line argument parsing."""

    def test_default_args(self):
        """Test default arguments."""
        test_args = ["chaosflow", "alpha", "--config", "alpha.json"]
        with patch.object(sys, 'argv', test_args):
            args = cli.parse_args()
            self.assertEqual(args.experiment, "alpha")
            self.assertEqual(args.config, "alpha.json")
            self.assertIsNone(args.seed)
            self.assertIsNone(args.out)
            self.assertIsNone(args.threads)
            self.assertFalse(args.summary)
            self.assertFalse(args.json)
            self.assertEqual(args.verbose, 0)

    def test_overrides(self):
        """Test --seed, --out and --threads."""
        args = cli.parse_args(["kv", "--config", "kv.json", "--seed", "7", "--out", "out", "--threads", "4"])
        self.assertEqual(args.seed, 7)
        self.assertEqual(args.out, "out")
        self.assertEqual(args.threads, 4)

    def test_summary_option(self):
        """Test --summary option."""
        args = cli.parse_args(["alpha", "--config", "a.json", "--summary"])
        self.assertTrue(args.summary)

    def test_json_option(self):
        """Test --json option."""
        args = cli.parse_args(["alpha", "--config", "a.json", "--json"])
        self.assertTrue(args.json)

    def test_verbose_count(self):
        args = cli.parse_args(["alpha", "--config", "a.json", "-vv"])
        self.assertEqual(args.verbose, 2)

    def test_unknown_experiment(self):
        with self.assertRaises(SystemExit) as ctx:
            cli.parse_args(["ping", "--config", "a.json"])
        self.assertEqual(ctx.exception.code, 2)

    def test_config_required(self):
        with self.assertRaises(SystemExit) as ctx:
            cli.parse_args(["alpha"])
        self.assertEqual(ctx.exception.code, 2)

    @patch('chaosflow.cli.load_config')
    def test_load_applies_overrides(self, mock_load):
        mock_load.return_value = ExperimentConfig("alpha", 1)
        args = cli.parse_args(["alpha", "--config", "a.json", "--seed", "9", "--out", "elsewhere", "--threads", "3"])
        config, workers = cli.load(args)
        self.assertEqual(config.seed, 9)
        self.assertEqual(config.out_dir, "elsewhere")
        self.assertEqual(workers, 3)

    @patch('chaosflow.cli.load_config')
    def test_load_rejects_mismatched_experiment(self, mock_load):
        mock_load.return_value = ExperimentConfig("kv", 1)
        args = cli.parse_args(["alpha", "--config", "a.json"])
        with self.assertRaises(ConfigError):
            cli.load(args)

    @patch('chaosflow.cli.load_config')
    def test_load_rejects_negative_seed(self, mock_load):
        mock_load.return_value = ExperimentConfig("alpha", 1)
        args = cli.parse_args(["alpha", "--config", "a.json", "--seed", "-1"])
        with self.assertRaises(ConfigError):
            cli.load(args)

    @patch('chaosflow.cli.load_config')
    @patch('chaosflow.cli.core.run_experiment')
    @patch('chaosflow.cli.core.write_report')
    @patch('chaosflow.cli.core.format_output')
    @patch('sys.exit')
    def test_main_success(self, mock_exit, mock_format, mock_write, mock_run, mock_load):
        """Test main function when every test passes."""
        mock_load.return_value = ExperimentConfig("alpha", 1)
        mock_run.return_value = (_report(True), {})
        mock_format.return_value = "Test output"

        test_args = ["chaosflow", "alpha", "--config", "a.json", "--threads", "2"]
        with patch.object(sys, 'argv', test_args):
            cli.main()

        mock_run.assert_called_once()
        self.assertEqual(mock_run.call_args[0][1], 2)
        mock_write.assert_called_once()
        mock_format.assert_called_once()
        mock_exit.assert_called_once_with(0)

    @patch('chaosflow.cli.load_config')
    @patch('chaosflow.cli.core.run_experiment')
    @patch('chaosflow.cli.core.write_report')
    @patch('chaosflow.cli.core.format_output')
    @patch('sys.exit')
    def test_main_failed_tests(self, mock_exit, mock_format, mock_write, mock_run, mock_load):
        mock_load.return_value = ExperimentConfig("alpha", 1)
        mock_run.return_value = (_report(False), {})
        mock_format.return_value = "Test output"

        with patch('sys.stderr', new_callable=io.StringIO) as stderr:
            cli.main(["alpha", "--config", "a.json", "--threads", "1"])

        mock_write.assert_called_once()
        mock_exit.assert_called_once_with(1)
        self.assertIn("failed tests: alpha_bridge_mc", stderr.getvalue())

    @patch('chaosflow.cli.load_config')
    @patch('chaosflow.cli.core.run_experiment')
    @patch('sys.exit')
    def test_main_config_error(self, mock_exit, mock_run, mock_load):
        mock_load.side_effect = ConfigError("config must set a seed")

        cli.main(["alpha", "--config", "a.json"])

        mock_run.assert_not_called()
        mock_exit.assert_called_once_with(2)

    @patch('chaosflow.cli.load_config')
    @patch('chaosflow.cli.core.run_experiment')
    @patch('chaosflow.cli.core.write_report')
    @patch('sys.exit')
    def test_main_runtime_error(self, mock_exit, mock_write, mock_run, mock_load):
        mock_load.return_value = ExperimentConfig("girsanov-check", 1)
        mock_run.side_effect = RejectionBudgetExceeded("no surviving path")

        cli.main(["girsanov-check", "--config", "g.json", "--threads", "1"])

        mock_write.assert_not_called()
        mock_exit.assert_called_once_with(1)

    @patch('chaosflow.cli.load_config')
    @patch('chaosflow.cli.core.run_experiment')
    @patch('chaosflow.cli.core.write_report')
    @patch('sys.exit')
    def test_main_interrupted(self, mock_exit, mock_write, mock_run, mock_load):
        mock_load.return_value = ExperimentConfig("alpha", 1)
        mock_run.side_effect = KeyboardInterrupt()

        cli.main(["alpha", "--config", "a.json", "--threads", "1"])

        mock_write.assert_not_called()
        mock_exit.assert_called_once_with(130)


if __name__ == '__main__':
    unittest.main()
