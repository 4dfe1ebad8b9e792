"""
Experiment configuration.

Configs are JSON files; the keys not listed in ExperimentConfig are rejected so
that typos surface as errors instead of silently falling back to defaults.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields

from .barrier import barrier_from_dict
from .chaos import default_kernels, kernel_from_dict
from .errors import ChaosflowError, ConfigError
from .kv import function_from_dict

logger = logging.getLogger(__name__)

EXPERIMENTS = ("alpha", "clark-verify", "chaos-orth", "girsanov-check", "expand", "kv", "coefficients")
THREADS_ENV = "CHAOSFLOW_THREADS"

DEFAULT_GRIDS = {
    "n_steps": 1024,
    "pde_n_s": 400,
    "pde_n_y": 400,
    "n_horizons": 64,
}


@dataclass
class ExperimentConfig:
    """A parsed experiment config."""

    experiment: str
    seed: int
    barrier: dict = field(default_factory=lambda: {"kind": "constant", "level": 1.0})
    grids: dict = field(default_factory=dict)
    kernels: dict = field(default_factory=dict)
    f: dict = None
    n_paths: int = 10000
    z_threshold: float = 3.0
    threads: int = None
    out_dir: str = "results"
    horizon: float = 1.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.grids = {**DEFAULT_GRIDS, **(self.grids or {})}

    def grid(self, name):
        return int(self.grids[name])

    def build_barrier(self):
        try:
            return barrier_from_dict({"horizon": self.horizon, **self.barrier})
        except (ValueError, TypeError) as e:
            raise ConfigError(f"barrier: {e}") from e

    def build_kernels(self, order=None, horizon=None):
        """
        Kernels declared in the config, or the default set when none are declared.

        Args:
            order: only return kernels of this order
            horizon: domain of the kernels (default the config horizon)

        Returns:
            dict name -> kernel on [0, horizon]
        """
        horizon = self.horizon if horizon is None else horizon
        if not self.kernels:
            kernels = {}
            for n in range(1, 4):
                kernels.update({f"{name}{n}": k for name, k in default_kernels(n, horizon).items()})
        else:
            kernels = {}
            for name, spec in self.kernels.items():
                try:
                    kernels[name] = kernel_from_dict(spec, horizon)
                except (ChaosflowError, ValueError, TypeError, KeyError) as e:
                    raise ConfigError(f"kernel {name!r}: {e}") from e
        if order is not None:
            kernels = {name: k for name, k in kernels.items() if k.order == order}
        return kernels

    def build_function(self):
        if self.f is None:
            raise ConfigError(f"experiment {self.experiment!r} needs a test function 'f'")
        try:
            return function_from_dict(self.f)
        except (ValueError, TypeError, KeyError) as e:
            raise ConfigError(f"f: {e}") from e

    def to_dict(self):
        return asdict(self)


def parse_config(data):
    """
    Validate a decoded JSON config.

    Args:
        data: dict from the config file

    Returns:
        ExperimentConfig

    Raises:
        ConfigError: missing seed, unknown keys or experiment, bad values
    """
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    if "seed" not in data:
        raise ConfigError("config must set a seed")
    if "experiment" not in data:
        raise ConfigError("config must name an experiment")
    if data["experiment"] not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {data['experiment']!r}, expected one of {', '.join(EXPERIMENTS)}")
    seed = data["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    config = ExperimentConfig(**data)
    unknown_grids = sorted(set(config.grids) - set(DEFAULT_GRIDS))
    if unknown_grids:
        raise ConfigError(f"unknown grid keys: {', '.join(unknown_grids)}")
    if config.n_paths < 2:
        raise ConfigError(f"n_paths must be at least 2, got {config.n_paths}")
    if config.z_threshold <= 0:
        raise ConfigError(f"z_threshold must be positive, got {config.z_threshold}")
    return config


def load_config(path):
    """
    Read an experiment config from a JSON file.

    Raises:
        ConfigError: unreadable file, invalid JSON or invalid config
    """
    try:
        with open(path) as handle:
            data = json.load(handle)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror or e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {path}: {e}") from e
    config = parse_config(data)
    logger.info("loaded %s config from %s", config.experiment, path)
    return config


def resolve_threads(flag=None, config=None):
    """Worker count: --threads, then $CHAOSFLOW_THREADS, then the config, then 1."""
    if flag is not None:
        threads = flag
    elif os.environ.get(THREADS_ENV):
        try:
            threads = int(os.environ[THREADS_ENV])
        except ValueError as e:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {os.environ[THREADS_ENV]!r}") from e
    elif config is not None and config.threads is not None:
        threads = config.threads
    else:
        threads = 1
    if threads < 1:
        raise ConfigError(f"thread count must be positive, got {threads}")
    return int(threads)
