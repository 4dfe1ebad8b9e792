"""
Core orchestration and output formatting for experiments.

Dispatches a config to its runner, assembles the report and writes the report
JSON and CSV tables once the experiment has finished.
"""

import csv
import json
import logging
import math
import os

import numpy as np
from scipy.stats import norm

from .experiments import RUNNERS
from .montecarlo import summarize

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"
# Above this many tests the report carries a multiple-testing note.
BONFERRONI_LIMIT = 20


def run_experiment(config, workers=1):
    """
    Run the experiment named by a config.

    Args:
        config: ExperimentConfig
        workers: number of threads for Monte Carlo loops

    Returns:
        tuple (report dict, tables dict)
    """
    runner = RUNNERS[config.experiment]
    logger.info("running %s with seed %d on %d workers", config.experiment, config.seed, workers)
    result = runner(config, workers)
    tests = result["tests"]
    failed = summarize(tests)
    report = {
        "schema_version": SCHEMA_VERSION,
        "experiment": config.experiment,
        "seed": config.seed,
        "workers": workers,
        "config": config.to_dict(),
        "tests": tests,
        "values": result["values"],
        "all_pass": not failed,
        "failed": failed,
        "tables": sorted(result["tables"]),
    }
    if len(tests) > BONFERRONI_LIMIT:
        report["bonferroni_note"] = (
            f"{len(tests)} tests at |z| <= {config.z_threshold}: expect about "
            f"{len(tests) * math.erfc(config.z_threshold / math.sqrt(2)):.2f} false failures; "
            f"a Bonferroni threshold would be {_bonferroni(len(tests), config.z_threshold):.2f}"
        )
    return report, result["tables"]


def _bonferroni(n_tests, threshold):
    """z threshold with the family-wise level of one test at `threshold`."""
    level = math.erfc(threshold / math.sqrt(2)) / n_tests
    return float(norm.isf(level / 2))


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    return value


def write_table(path, table):
    """Write a list of row dicts, or an object with write_csv, to a CSV file."""
    if hasattr(table, "write_csv"):
        table.write_csv(path)
        return
    rows = list(table)
    with open(path, "w", newline="") as handle:
        if not rows:
            return
        writer = csv.DictWriter(handle, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow(_plain(row))


def write_report(report, tables, out_dir):
    """
    Write report.json and the CSV tables into out_dir.

    Returns:
        path of the report file
    """
    os.makedirs(out_dir, exist_ok=True)
    for name, table in tables.items():
        write_table(os.path.join(out_dir, name), table)
    path = os.path.join(out_dir, "report.json")
    with open(path, "w") as handle:
        json.dump(_plain(report), handle, indent=2)
    logger.info("wrote %s and %d tables", path, len(tables))
    return path


def format_output(report, summary_only=False, json_format=False):
    """
    Format an experiment report for output.

    Args:
        report: dict from run_experiment
        summary_only: if True, only show the summary
        json_format: if True, output as JSON

    Returns:
        string with formatted output
    """
    if json_format:
        return format_json_output(report)
    elif summary_only:
        return format_summary_only(report)
    else:
        return format_detailed_output(report)


def format_json_output(report):
    return json.dumps(_plain(report), indent=2)


def format_summary_only(report):
    return generate_summary(report) + "\n"


def _format_number(value):
    if value is None:
        return "-"
    return f"{value:.6g}"


def format_test(test):
    status = "PASS" if test["pass"] else "FAIL"
    line = f"  [{status}] {test['name']}: {_format_number(test['estimate'])}"
    if test["stderr"] is not None:
        line += f" +- {_format_number(test['stderr'])}"
    if test["target"] is not None:
        line += f" (target {_format_number(test['target'])}"
        if test["z_score"] is not None:
            line += f", z={_format_number(test['z_score'])} <= {_format_number(test['threshold'])}"
        elif test["threshold"] is not None:
            line += f", tolerance {_format_number(test['threshold'])}"
        line += ")"
    return line


def format_detailed_output(report):
    """Format detailed output with sections."""
    lines = [f"=== {report['experiment']} (seed {report['seed']}, {report['workers']} workers) ==="]

    if report["values"]:
        lines.append("")
        lines.append("=== Values ===")
        for key, value in report["values"].items():
            if isinstance(value, dict) and "mean" in value:
                lines.append(f"{key}: {_format_number(value['mean'])} +- {_format_number(value['stderr'])}")
            elif isinstance(value, float):
                lines.append(f"{key}: {_format_number(value)}")
            else:
                lines.append(f"{key}: {value}")

    lines.append("")
    lines.append("=== Tests ===")
    for test in report["tests"]:
        lines.append(format_test(test))

    if report["tables"]:
        lines.append("")
        lines.append("=== Tables ===")
        lines.extend(f"  {name}" for name in report["tables"])

    lines.append("")
    lines.append("=== Summary ===")
    lines.append(generate_summary(report))
    return "\n".join(lines)


def generate_summary(report):
    """
    Generate a short summary of an experiment report.

    Returns:
        string with summary text
    """
    tests = report["tests"]
    if not tests:
        return f"{report['experiment']}: no tests run."
    passed = sum(1 for t in tests if t["pass"])
    parts = [f"{report['experiment']}: {passed}/{len(tests)} tests passed."]
    if "alpha_0_0" in report["values"]:
        parts.append(f"alpha(0, 0) = {report['values']['alpha_0_0']:.7f}")
    if report["failed"]:
        parts.append("Failed: " + ", ".join(report["failed"]))
    if "bonferroni_note" in report:
        parts.append("Note: " + report["bonferroni_note"])
    return "\n".join(parts)
