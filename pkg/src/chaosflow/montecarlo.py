"""
Seeded Monte Carlo harness: samplers, estimates with standard errors and z-score tests.

Ensembles are cut into fixed chunks of path indices. Each chunk draws its paths
from the per-index streams, so the values do not depend on the number of
workers; means are accumulated with math.fsum.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import DegenerateVariance, SamplerFailure
from .girsanov import sample_conditioned_ensemble
from .paths import sample_brownian_ensemble

logger = logging.getLogger(__name__)

CHUNK_SIZE = 2000
DEFAULT_THRESHOLD = 3.0


@dataclass(frozen=True)
class MCEstimate:
    """Sample mean with its standard error sample_std / sqrt(n)."""

    mean: float
    stderr: float
    n: int
    method: str = "iid"

    def z_score(self, target=0.0):
        return _z(self.mean - target, self.stderr)

    def to_dict(self):
        return {"mean": self.mean, "stderr": self.stderr, "n": self.n, "method": self.method}


def _z(diff, stderr):
    if stderr > 0:
        return abs(diff) / stderr
    return 0.0 if diff == 0 else math.inf


def from_samples(values):
    """MCEstimate of an array of i.i.d. samples (stderr 0 for fewer than 2)."""
    values = np.asarray(values, dtype=float).ravel()
    n = values.size
    mean = math.fsum(values) / n
    if n < 2:
        return MCEstimate(mean, 0.0, n)
    variance = math.fsum((values - mean) ** 2) / (n - 1)
    return MCEstimate(mean, math.sqrt(variance / n), n)


def chunks(n, chunk_size=CHUNK_SIZE):
    return [(start, min(chunk_size, n - start)) for start in range(0, n, chunk_size)]


def collect(evaluate, sampler, n, seed, workers=1, chunk_size=CHUNK_SIZE):
    """
    Evaluate functionals on n sampled paths.

    Args:
        evaluate: callable PathBatch -> array (count,) or dict of such arrays
        sampler: callable (seed, start, count) -> PathBatch
        n: number of paths
        seed: experiment seed
        workers: number of threads
        chunk_size: paths per chunk, independent of `workers`

    Returns:
        array (n,) or dict of arrays, in path-index order

    Raises:
        SamplerFailure: the sampler raised while producing a chunk
    """

    def run(chunk):
        start, count = chunk
        try:
            batch = sampler(seed, start, count)
        except Exception as e:
            raise SamplerFailure(f"sampler failed on paths {start}..{start + count - 1}: {e}") from e
        return evaluate(batch)

    parts = chunks(n, chunk_size)
    if workers > 1 and len(parts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, parts))
    else:
        results = [run(part) for part in parts]
    logger.debug("collected %d paths in %d chunks with %d workers", n, len(parts), workers)
    if isinstance(results[0], dict):
        return {key: np.concatenate([np.atleast_1d(r[key]) for r in results]) for key in results[0]}
    return np.concatenate([np.atleast_1d(r) for r in results])


def estimate(functional, sampler, n, seed, workers=1):
    """
    Monte Carlo estimate of E[functional].

    Args:
        functional: callable PathBatch -> array of per-path values
        sampler: callable (seed, start, count) -> PathBatch
        n: number of paths, at least 2
        seed: experiment seed

    Returns:
        MCEstimate, identical for identical (seed, n) whatever `workers` is
    """
    if n < 2:
        raise ValueError(f"need at least 2 paths, got {n}")
    return from_samples(collect(functional, sampler, n, seed, workers))


def per_path(func):
    """Lift a Path -> float function to a PathBatch functional."""

    def functional(batch):
        return np.array([func(batch.path(k)) for k in range(batch.count)])

    return functional


# Test records

def z_result(name, estimate, stderr, target=0.0, threshold=DEFAULT_THRESHOLD):
    """Report entry of a z-score test |estimate - target| / stderr <= threshold."""
    z = _z(estimate - target, stderr)
    return {
        "name": name,
        "estimate": float(estimate),
        "stderr": float(stderr),
        "target": float(target),
        "z_score": z,
        "threshold": float(threshold),
        "pass": bool(z <= threshold),
    }


def tolerance_result(name, estimate, target, tolerance):
    """Report entry of a deterministic check |estimate - target| <= tolerance."""
    return {
        "name": name,
        "estimate": float(estimate),
        "stderr": None,
        "target": float(target),
        "z_score": None,
        "threshold": float(tolerance),
        "pass": bool(abs(estimate - target) <= tolerance),
    }


def flag_result(name, passed, estimate=None, target=None):
    """Report entry of a property check."""
    return {
        "name": name,
        "estimate": None if estimate is None else float(estimate),
        "stderr": None,
        "target": None if target is None else float(target),
        "z_score": None,
        "threshold": None,
        "pass": bool(passed),
    }


def z_test(est, target=0.0, threshold=DEFAULT_THRESHOLD, name="z_test"):
    return z_result(name, est.mean, est.stderr, target, threshold)


def product_test(x, y, threshold=DEFAULT_THRESHOLD, name="orthogonality"):
    """
    z-score of mean(x * y) against 0.

    Raises:
        DegenerateVariance: zero standard error with a nonzero mean
    """
    est = from_samples(np.asarray(x, dtype=float) * np.asarray(y, dtype=float))
    if est.stderr == 0.0 and est.mean != 0.0:
        raise DegenerateVariance(f"{name}: zero standard error with mean {est.mean}")
    return z_result(name, est.mean, est.stderr, 0.0, threshold)


def orthogonality_test(X, Y, sampler, n, seed, z_threshold=DEFAULT_THRESHOLD, workers=1):
    """
    Check E[X Y] = 0 on n sampled paths.

    Args:
        X, Y: PathBatch functionals
        n: number of paths, at least 100

    Returns:
        dict with z_score, pass, estimate and stderr
    """
    if n < 100:
        raise ValueError(f"orthogonality test needs at least 100 paths, got {n}")
    values = collect(lambda b: {"x": X(b), "y": Y(b)}, sampler, n, seed, workers)
    return product_test(values["x"], values["y"], z_threshold, "orthogonality")


def ks_compare(a, b):
    """Two-sample Kolmogorov-Smirnov comparison."""
    result = stats.ks_2samp(np.asarray(a), np.asarray(b))
    return {"statistic": float(result.statistic), "pvalue": float(result.pvalue)}


def ks_critical(n, m, level=0.01):
    """Asymptotic critical distance of the two-sample KS test."""
    c = math.sqrt(-0.5 * math.log(level / 2.0))
    return c * math.sqrt((n + m) / (n * m))


# Samplers

def brownian_sampler(grid):
    def sampler(seed, start, count):
        return sample_brownian_ensemble(grid, count, seed, start)

    return sampler


def conditioned_sampler(field, grid, method="h_transform", max_attempts=100000):
    def sampler(seed, start, count):
        return sample_conditioned_ensemble(field, grid, count, seed, method, start, max_attempts)

    return sampler


def summarize(tests):
    failed = [t["name"] for t in tests if not t["pass"]]
    if failed:
        logger.warning("%d of %d tests failed: %s", len(failed), len(tests), ", ".join(failed))
    return failed

