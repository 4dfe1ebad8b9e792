"""
Experiment runners.

Every runner takes an ExperimentConfig and a worker count and returns a dict
with the statistical tests, the scalar values worth reporting and the tables to
export (lists of row dicts, or objects with a write_csv method).
"""

import logging
import math

import numpy as np

from .barrier import (
    ConstantBarrier,
    LinearBarrier,
    alpha_closed_form,
    alpha_fpt_integral,
    alpha_pde,
    dlog_alpha_dy,
    monotone_limit_check,
    survival_model,
)
from .chaos import ProductBasisKernel, hermite, hermite_shift_check, kernel_inner
from .errors import ConfigError, LineNotBelowBarrier, NearBarrier, QuadratureNotConverged
from .expansion import (
    FieldFamily,
    coefficient_recovery_example,
    conditioning_check,
    kappa_suite,
    nu_suite,
    parseval_study,
    transformed_path_study,
)
from .girsanov import (
    DriftField,
    acceptance_rate,
    clark_integrands,
    drift_along,
    sample_conditioned_ensemble,
    transform_ensemble,
)
from .kv import Semigroup, kv_bridge_check, kv_truncation_study, semigroup_apply
from .montecarlo import (
    brownian_sampler,
    collect,
    conditioned_sampler,
    flag_result,
    from_samples,
    ks_compare,
    ks_critical,
    product_test,
    tolerance_result,
    z_result,
)
from .paths import AUX_STREAM, TimeGrid, batch_first_passage, ito_sums, stream

logger = logging.getLogger(__name__)

ISOMETRY_THRESHOLD = 5.0


def _pde_options(config):
    return {"n_s": config.grid("pde_n_s"), "n_y": config.grid("pde_n_y")}


def _drift_field(config, barrier, t):
    params = config.params
    model = survival_model(barrier, t, params.get("backend", "auto"), **_pde_options(config))
    return DriftField(model, params.get("policy", "clamp"), params.get("max_abs", 1e3))


def _path_grid(config, t=None):
    return TimeGrid(config.horizon if t is None else t, config.grid("n_steps"))


def _result(tests, values=None, tables=None):
    return {"tests": tests, "values": values or {}, "tables": tables or {}}


# alpha

def _sup_error(field, barrier, floor=0.05):
    """Largest |alpha_pde - closed form| over table points with alpha > floor."""
    worst = 0.0
    for i, s in enumerate(field.s):
        y = field.y_grid(i)
        exact = np.asarray(alpha_closed_form(barrier, s, y, field.horizon))
        mask = field.alpha_table[i] > floor
        if np.any(mask):
            worst = max(worst, float(np.max(np.abs(field.alpha_table[i][mask] - exact[mask]))))
    return worst


def _lower_barriers(barrier):
    """Barriers g - 1/k increasing to g, for the closed-form variants."""
    out = []
    for k in (2, 4, 8, 16, 32):
        shifted = barrier.level - 1.0 / k
        if shifted <= 0:
            continue
        if isinstance(barrier, LinearBarrier):
            out.append(LinearBarrier(shifted, barrier.rate, barrier.horizon))
        else:
            out.append(ConstantBarrier(shifted, barrier.horizon))
    return out


def run_alpha(config, workers=1):
    """Survival probability alpha^t(0, 0) from every backend that applies."""
    barrier = config.build_barrier()
    t = config.horizon
    params = config.params
    tolerance = params.get("tolerance", 1e-3)
    field = alpha_pde(barrier, t, **_pde_options(config))
    alpha00 = float(field.alpha(0.0, 0.0))
    values = {"alpha_0_0": alpha00}
    tests = []
    try:
        values["dlog_alpha_dy_0_0"] = dlog_alpha_dy(field, 0.0, 0.0)
    except NearBarrier:
        logger.warning("alpha(0, 0) below the drift floor")

    closed = isinstance(barrier, (ConstantBarrier, LinearBarrier))
    if closed:
        exact = float(alpha_closed_form(barrier, 0.0, 0.0, t))
        values["alpha_closed_form"] = exact
        tests.append(tolerance_result("alpha_pde_vs_closed_form", alpha00, exact, tolerance))
        sup = _sup_error(field, barrier)
        tests.append(tolerance_result("alpha_pde_sup_error", sup, 0.0, tolerance))
        limit = monotone_limit_check(_lower_barriers(barrier), barrier, [(0.0, 0.0)], t)
        tests.append(flag_result("monotone_limit", limit["monotone"]))

    line = params.get("line", {"z": 0.5 * float(barrier(0.0)), "c": 0.25})
    try:
        fpt = alpha_fpt_integral(barrier, 0.0, 0.0, t, line["z"], line["c"], survival=field)
    except LineNotBelowBarrier as e:
        logger.warning("first-passage backend skipped: %s", e)
    except QuadratureNotConverged as e:
        logger.warning("first-passage backend: %s", e)
        tests.append(flag_result("alpha_fpt_converged", False))
    else:
        values["alpha_fpt_integral"] = fpt["alpha"]
        tests.append(tolerance_result("alpha_fpt_vs_pde", fpt["alpha"], alpha00, tolerance))

    if params.get("monte_carlo", True):
        grid = _path_grid(config)

        def survived(batch):
            return (~batch_first_passage(batch, barrier, "bridge").hit).astype(float)

        est = from_samples(collect(survived, brownian_sampler(grid), config.n_paths, config.seed, workers))
        values["alpha_bridge_mc"] = est.to_dict()
        tests.append(z_result("alpha_bridge_mc", est.mean, est.stderr, alpha00, config.z_threshold))
    return _result(tests, values, {"survival_field.csv": field})


# clark-verify

def run_clark_verify(config, workers=1):
    """
    Clark representation of the survival indicator over refined grids.

    Reconstruction alpha(0, 0) + int h dw is compared with 1{tau = t} on
    unconditioned paths with bridge-corrected first passages.
    """
    barrier = config.build_barrier()
    t = config.horizon
    params = config.params
    field = _drift_field(config, barrier, t)
    alpha00 = float(field.alpha(0.0, 0.0))
    levels = params.get("levels", [8, 10, 12])
    mark = params.get("martingale_time", 0.5)
    tests, rows = [], []
    residuals = []
    for level in levels:
        grid = TimeGrid(t, 2 ** level)
        ks = int(round(mark / t * grid.n_steps))

        def evaluate(batch, grid=grid, ks=ks):
            hits = batch_first_passage(batch, barrier, "bridge")
            recon = alpha00 + ito_sums(clark_integrands(batch.values, grid, field, hits), batch.values)
            indicator = (~hits.hit).astype(float)
            alive = ~hits.hit | (hits.crossing_index >= ks)
            martingale = np.where(alive, field.alpha(grid.times[ks], batch.values[:, ks]), 0.0)
            return {"recon": recon, "indicator": indicator, "martingale": martingale}

        v = collect(evaluate, brownian_sampler(grid), config.n_paths, config.seed, workers)
        recon = from_samples(v["recon"])
        residual = from_samples((v["indicator"] - v["recon"]) ** 2)
        correlation = float(np.corrcoef(v["recon"], v["indicator"])[0, 1])
        residuals.append(residual)
        tests.append(z_result(f"clark_mean[2^{level}]", recon.mean, recon.stderr, alpha00, config.z_threshold))
        mart = from_samples(v["martingale"])
        tests.append(z_result(f"survival_martingale[2^{level}]", mart.mean, mart.stderr, alpha00,
                              config.z_threshold))
        rows.append({"n_steps": grid.n_steps, "residual": residual.mean, "stderr": residual.stderr,
                     "correlation": correlation})
        logger.info("clark 2^%d: residual %.5f, correlation %.4f", level, residual.mean, correlation)

    nearest = min(range(len(levels)), key=lambda i: abs(levels[i] - 10))
    tests.append(flag_result(f"clark_correlation[2^{levels[nearest]}]",
                             rows[nearest]["correlation"] > params.get("min_correlation", 0.98),
                             rows[nearest]["correlation"]))
    tests.append(flag_result("clark_residual_decreasing",
                             all(b.mean < a.mean for a, b in zip(residuals[:-1], residuals[1:]))))
    return _result(tests, {"alpha_0_0": alpha00}, {"clark_residuals.csv": rows})


# chaos-orth

def _hermite_checks(config):
    rng = stream(config.seed, AUX_STREAM, 0)
    n = config.params.get("hermite_samples", 10 * config.n_paths)
    x = rng.standard_normal(n)
    h2, h3 = hermite(2, x), hermite(3, x)
    cross = from_samples(h2 * h3)
    square = from_samples(h3 ** 2)
    tests = [
        z_result("hermite_orthogonal[2,3]", cross.mean, cross.stderr, 0.0, config.z_threshold),
        z_result("hermite_norm[3]", square.mean, square.stderr, 6.0, config.z_threshold),
    ]
    worst = 0.0
    for _ in range(200):
        k = int(rng.integers(0, 9))
        a, b = rng.uniform(-3.0, 3.0, size=2)
        worst = max(worst, hermite_shift_check(k, a, b) / (1.0 + abs(hermite(k, a + b))))
    tests.append(tolerance_result("hermite_shift", worst, 0.0, 1e-9))
    return tests


def _wiener_suite(kernels, grid, n_paths, seed, threshold, workers, hermite_tolerance):
    """Isometry and orthogonality of I_n under the Wiener measure, plus the Hermite closed form."""
    closed = {name for name, k in kernels.items() if isinstance(k, ProductBasisKernel) and k.orthonormal()}

    def evaluate(batch):
        dw = batch.increments
        out = {name: k.wiener_integrals(grid, dw) for name, k in kernels.items()}
        for name in closed:
            out[f"hermite:{name}"] = kernels[name].hermite_integrals(grid, dw)
        return out

    values = collect(evaluate, brownian_sampler(grid), n_paths, seed, workers)
    tests, rows = [], []
    for name, k in kernels.items():
        norm = math.factorial(k.order) * kernel_inner(k, k)
        est = from_samples(values[name] ** 2)
        tests.append(z_result(f"wiener_isometry[{name}]", est.mean / norm, est.stderr / norm, 1.0,
                              ISOMETRY_THRESHOLD))
        rows.append({"order": k.order, "estimate": est.mean, "stderr": est.stderr, "oracle": norm})
        if name in closed:
            gap = float(np.mean(np.abs(values[name] - values[f"hermite:{name}"])))
            tests.append(tolerance_result(f"hermite_mode[{name}]", gap, 0.0, hermite_tolerance))
    names = list(kernels)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            if kernels[a].order != kernels[b].order:
                tests.append(product_test(values[a], values[b], threshold, f"wiener_orthogonal[{a},{b}]"))
    return tests, rows


def run_chaos_orth(config, workers=1):
    """Orthogonality and isometry of I_n under the Wiener measure and of I^kappa_n under the conditioned law."""
    barrier = config.build_barrier()
    params = config.params
    tests = _hermite_checks(config)
    tables = {}
    grid = _path_grid(config)
    wiener, rows = _wiener_suite(config.build_kernels(), grid, config.n_paths, config.seed, config.z_threshold,
                                 workers, params.get("hermite_tolerance", 0.25))
    tests += wiener
    tables["wiener_norms.csv"] = rows
    method = params.get("method", "h_transform")
    for h in params.get("horizons", [0.5, config.horizon]):
        field = _drift_field(config, barrier, h)
        kernels = config.build_kernels(horizon=h)
        kappa, rows = kappa_suite(field, kernels, _path_grid(config, h), config.n_paths, config.seed, method,
                                  config.z_threshold, ISOMETRY_THRESHOLD, workers, prefix=f"t={h:g}:")
        tests += kappa
        tables[f"kappa_norms_t{h:g}.csv"] = rows
    return _result(tests, {}, tables)


# girsanov-check

def _ensemble_rows(batch, limit):
    rows = []
    for k in range(min(limit, batch.count)):
        for t, value in zip(batch.grid.times, batch.values[k]):
            rows.append({"path_id": int(batch.start + k), "t": float(t), "value": float(value)})
    return rows


def run_girsanov_check(config, workers=1):
    """
    Push-forward of the conditioned law by T_g, and agreement of the two
    conditioned samplers.
    """
    barrier = config.build_barrier()
    t = config.horizon
    params = config.params
    field = _drift_field(config, barrier, t)
    grid = _path_grid(config)
    threshold = config.z_threshold
    alpha00 = float(field.alpha(0.0, 0.0))
    marks = [int(round(q * grid.n_steps)) for q in params.get("mark_fractions", [0.2, 0.4, 0.6, 0.8, 1.0])]
    gvals = np.asarray(barrier(grid.times), dtype=float)

    def evaluate(batch):
        moved = transform_ensemble(batch, field)
        drift = drift_along(batch.values, grid, field)
        out = {
            "qv": np.sum(moved.increments ** 2, axis=1),
            "max": batch.values.max(axis=1),
            "end": batch.values[:, -1],
            "below": np.all(batch.values < gvals[None, :], axis=1).astype(float),
            "drift_l2": np.sum(drift[:, :-1] ** 2, axis=1) * grid.dt,
            "distinct": np.r_[np.any(moved.values[1:] != moved.values[:-1], axis=1), True].astype(float),
        }
        for k in marks:
            out[f"w{k}"] = moved.values[:, k]
        return out

    values = collect(evaluate, conditioned_sampler(field, grid, "h_transform"), config.n_paths, config.seed,
                     workers)
    tests = []
    for k in marks:
        tk = grid.times[k]
        mean = from_samples(values[f"w{k}"])
        var = from_samples(values[f"w{k}"] ** 2)
        tests.append(z_result(f"pushforward_mean[t={tk:.3f}]", mean.mean, mean.stderr, 0.0, ISOMETRY_THRESHOLD))
        tests.append(z_result(f"pushforward_variance[t={tk:.3f}]", var.mean, var.stderr, tk, ISOMETRY_THRESHOLD))
    qv = from_samples(values["qv"])
    result = tolerance_result("quadratic_variation", qv.mean, t, max(ISOMETRY_THRESHOLD * qv.stderr, 0.01 * t))
    result["stderr"] = qv.stderr
    tests.append(result)
    tests.append(flag_result("paths_below_barrier", bool(np.all(values["below"] == 1.0))))
    tests.append(flag_result("transform_injective", bool(np.all(values["distinct"] == 1.0))))
    bound = field.max_abs ** 2 * t
    tests.append(flag_result("cameron_martin_shift", bool(np.all(np.isfinite(values["drift_l2"]))
                                                         and np.all(values["drift_l2"] <= bound)),
                             float(np.max(values["drift_l2"]))))

    n_rej = min(params.get("rejection_paths", 10000), config.n_paths)
    rejected, attempts = sample_conditioned_ensemble(field, grid, n_rej, config.seed, "rejection",
                                                     max_attempts=params.get("max_attempts", 100000),
                                                     return_attempts=True)
    rate, rate_se = acceptance_rate(attempts)
    tests.append(z_result("rejection_acceptance", rate, rate_se, alpha00, threshold))
    ks = ks_compare(values["end"][:n_rej], rejected.values[:, -1])
    critical = ks_critical(n_rej, n_rej, 0.01)
    tests.append(flag_result("methods_ks_end_value", ks["statistic"] < critical, ks["statistic"], critical))
    h_max = from_samples(values["max"])
    r_max = from_samples(rejected.values.max(axis=1))
    tests.append(z_result("methods_expected_max", h_max.mean - r_max.mean, math.hypot(h_max.stderr, r_max.stderr),
                          0.0, threshold))

    export = params.get("export_paths", 10)
    sample = sample_conditioned_ensemble(field, grid, export, config.seed)
    tables = {
        "conditioned_paths.csv": _ensemble_rows(sample, export),
        "transformed_paths.csv": _ensemble_rows(transform_ensemble(sample, field), export),
    }
    return _result(tests, {"alpha_0_0": alpha00, "acceptance_rate": rate, "ks": ks}, tables)


# expand

def run_expand(config, workers=1):
    """Stopped-flow suite: norm identity, sandwich bounds, conditioning, Parseval and the pathwise identities."""
    barrier = config.build_barrier()
    params = config.params
    grid = _path_grid(config)
    orders = params.get("orders", [1, 2])
    fields = FieldFamily.from_barrier(barrier, grid, config.grid("n_horizons"), params.get("backend", "auto"),
                                      params.get("policy", "clamp"), params.get("max_abs", 1e3),
                                      **_pde_options(config))
    kernels = {name: k for n in orders for name, k in config.build_kernels(order=n).items()}
    if not kernels:
        raise ConfigError(f"no kernels of orders {orders} declared")

    tests, rows = nu_suite(barrier, kernels, grid, config.n_paths, config.seed, fields,
                           threshold=config.z_threshold, iso_threshold=ISOMETRY_THRESHOLD, workers=workers)
    values = {}

    for n in params.get("conditioning_orders", [1, 2]):
        one = config.build_kernels(order=n)
        kernel = one.get(f"one{n}") or next(iter(one.values()), None)
        if kernel is None:
            continue
        report = conditioning_check(n, kernel, grid, barrier, params.get("conditioning_paths", config.n_paths),
                                    config.seed, threshold=config.z_threshold, workers=workers)
        tests += report["tests"]

    by_order = {n: config.build_kernels(order=n) for n in orders if n <= 2}
    parseval = parseval_study(barrier, grid, config.n_paths, config.seed, by_order, fields,
                              threshold=config.z_threshold, workers=workers)
    tests += parseval["tests"]
    values["parseval_norm"] = parseval["norm"]

    transform_grid = TimeGrid(config.horizon, params.get("transform_n_steps", 4096))
    field = fields.fields[-1]
    for n in (1, 2):
        first = next(iter(config.build_kernels(order=n).items()), None)
        if first is None:
            continue
        name, kernel = first
        study = transformed_path_study(kernel, field, transform_grid, params.get("transform_paths", 1000),
                                       config.seed, tolerance=params.get("transform_tolerance", 1e-2),
                                       workers=workers)
        for test in study["tests"]:
            test["name"] = f"{test['name']}[{name}]"
        tests += study["tests"]
        values[f"max_compensated_gap[{name}]"] = study["max_compensated_gap"]
    return _result(tests, values, {"nu_norms.csv": rows, "parseval.csv": parseval["rows"]})


# kv

def run_kv(config, workers=1):
    """KV truncation study and the order-one bridge into the stopped-flow expansion."""
    f = config.build_function()
    t = config.horizon
    params = config.params
    zero_drift = params.get("drift", "barrier") == "zero"
    barrier = None if zero_drift else config.build_barrier()
    field = None if zero_drift else _drift_field(config, barrier, t)
    sg = Semigroup(t, field, n_y=config.grid("pde_n_y"), n_lattice=params.get("n_lattice", 32),
                   substeps=params.get("substeps", 4))
    grid = _path_grid(config)
    study = kv_truncation_study(f, params.get("max_order", 3), config.n_paths, sg, grid, config.seed, workers,
                                config.z_threshold)
    tests = list(study["tests"])
    tests.append(z_result("feynman_kac", study["f_mean"]["mean"], study["f_mean"]["stderr"], study["k0"],
                          config.z_threshold))

    split = sg.times[sg.times.size // 2]
    terminal = sg.sample(f, sg.times.size - 1)
    direct = semigroup_apply(sg, 0.0, t, terminal)
    chained = semigroup_apply(sg, 0.0, split, semigroup_apply(sg, split, t, terminal))
    tests.append(tolerance_result("chapman_kolmogorov", float(np.max(np.abs(direct - chained))), 0.0, 1e-8))

    values = {"k0": study["k0"], "f_mean": study["f_mean"]}
    if barrier is not None and params.get("bridge_check", True):
        bridge = kv_bridge_check(f, barrier, grid, params.get("bridge_paths", config.n_paths), config.seed,
                                 params.get("bridge_horizons", 16), workers, config.z_threshold,
                                 n_y=config.grid("pde_n_y"))
        tests += bridge["tests"]
        values["bridge_projection"] = bridge["projection"]
        values["bridge_norm"] = bridge["norm"]
    return _result(tests, values, {"kv_residuals.csv": study["rows"]})


# coefficients

def run_coefficients(config, workers=1):
    """First chaos coefficient of w(tau ^ t) in both representations."""
    barrier = config.build_barrier()
    if not isinstance(barrier, ConstantBarrier):
        raise ConfigError("the coefficients experiment needs a constant barrier")
    report = coefficient_recovery_example(_path_grid(config), config.n_paths, config.seed, barrier.level,
                                          config.params.get("n_bins", 8), threshold=config.z_threshold,
                                          workers=workers)
    return _result(report["tests"], {}, {"coefficients.csv": report["rows"]})


RUNNERS = {
    "alpha": run_alpha,
    "clark-verify": run_clark_verify,
    "chaos-orth": run_chaos_orth,
    "girsanov-check": run_girsanov_check,
    "expand": run_expand,
    "kv": run_kv,
    "coefficients": run_coefficients,
}
