"""Command-line front end: ``python -m volterra_lift <experiment> [--config PATH]``.

Every experiment writes <out>/<experiment>/<config-hash>/ with data.csv,
report.json and manifest.json.  Exit codes: 0 pass, 1 hard error,
2 statistical soft-fail.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import checks, coupling, dynamics, gauss, io, rng
from .errors import ConfigError, KernelError, VolterraLiftError
from .kernels import (
    SCHEMES as DISCRETIZATION_SCHEMES,
    DiscreteMeasure,
    WeightFunction,
    discretize,
    invariant_criterion,
    kernel_from_dict,
    measure_from_dict,
)
from .liftspace import LiftState
from .settings import (
    EXIT_ERROR,
    EXIT_OK,
    EXIT_SOFT_FAIL,
    MC_SIGMAS,
    TOOL_VERSION,
    configure_logging,
    default_out_dir,
    default_threads,
)
from .slack_notifier import send_slack_message

logger = logging.getLogger(__name__)

EXPERIMENTS = ("simulate", "equivalence", "gauss", "couple", "harnack", "validate")


# ----- CONFIG -----

COEFFICIENT_FAMILIES = {
    "gaussian": (dynamics.gaussian_coefficients, {"n"}),
    "zero": (dynamics.zero_coefficients, {"n", "d"}),
    "affine": (dynamics.affine_coefficients, {"B", "b0", "S0", "S1"}),
    "smooth": (dynamics.smooth_coefficients, {"b0", "a", "s0", "s1", "n"}),
}


@dataclass(frozen=True)
class RunConfig:
    experiment: str
    kernel: dict = field(default_factory=lambda: {"variant": "gamma", "alpha": 0.7, "beta": 1.0})
    n: int = 50
    scheme: str = "geometric"
    horizon: float | None = None
    xi_max: float | None = None
    edges: tuple | None = None
    weight_p: float | None = None
    discretize: bool = True
    coefficients: dict = field(default_factory=lambda: {"family": "gaussian"})
    T: float = 1.0
    dt: float = 0.01
    n_paths: int = 1000
    seed: int = 0
    lift_scheme: str = "exact-ou-euler"
    y0: float = 0.0
    distance: float = 1.0
    matched_drift: bool = False
    threshold: float = 1e-10
    dts: tuple = ()
    trace_times: tuple = (0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0)
    witness: dict = field(default_factory=lambda: {"t": 1.0, "epsilon": 0.1, "cap": None})
    harnack_times: tuple = (1.0, 2.0, 4.0)
    n_random: int = 100
    perturb_norm_weight: float = 0.0

    def to_dict(self):
        return dataclasses.asdict(self)

    def sim_config(self, T=None, dt=None):
        return dynamics.SimConfig(T=self.T if T is None else T, dt=self.dt if dt is None else dt,
                                  n_paths=self.n_paths, seed=self.seed, scheme=self.lift_scheme)


_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}
_INT_FIELDS = ("n", "n_paths", "seed", "n_random")
_FLOAT_FIELDS = ("T", "dt", "y0", "distance", "threshold", "perturb_norm_weight")
_TUPLE_FIELDS = ("edges", "dts", "trace_times", "harnack_times")


def load_config_doc(path):
    """Read a JSON (or, with tomllib available, TOML) config document."""
    path = Path(path)
    if path.suffix == ".toml":
        try:
            import tomllib
        except ImportError:
            raise ConfigError([("config", "TOML configs need Python 3.11+ (tomllib); use JSON")]) from None
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError([("config", f"cannot read {path}: {exc.strerror}")]) from exc
    if not text.strip():
        return {}
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([("config", f"invalid JSON: {exc}")]) from exc
    if not isinstance(doc, dict):
        raise ConfigError([("config", "top level must be an object")])
    return doc


def build_kernel(doc):
    if not isinstance(doc, dict):
        raise KernelError("kernel must be an object with a 'variant' key")
    if doc.get("variant") == "discrete":
        return measure_from_dict(doc)
    return kernel_from_dict(doc)


def build_coefficients(doc):
    if not isinstance(doc, dict) or doc.get("family") not in COEFFICIENT_FAMILIES:
        raise ConfigError([("coefficients.family", f"must be one of {sorted(COEFFICIENT_FAMILIES)}")])
    factory, allowed = COEFFICIENT_FAMILIES[doc["family"]]
    params = {k: v for k, v in doc.items() if k != "family"}
    unknown = sorted(set(params) - allowed)
    if unknown:
        raise ConfigError([(f"coefficients.{k}", "unknown key") for k in unknown])
    return factory(**params)


def _check_number(doc, name, problems, kind):
    value = doc[name]
    if isinstance(value, bool) or not isinstance(value, kind):
        problems.append((name, f"must be {'an integer' if kind is int else 'a number'}, got {value!r}"))
        return False
    if kind is not int and not math.isfinite(value):
        problems.append((name, "must be finite"))
        return False
    return True


# This function validates a raw config document and builds the RunConfig.
# Problems are collected field by field and raised together.
def build_run_config(doc, experiment, seed=None, n_paths=None):
    doc = dict(doc or {})
    problems = []
    declared = doc.pop("experiment", experiment)
    if declared != experiment:
        problems.append(("experiment", f"config declares {declared!r} but the command is {experiment!r}"))
    if experiment not in EXPERIMENTS:
        problems.append(("experiment", f"must be one of {EXPERIMENTS}"))
    for key in sorted(set(doc) - _FIELDS):
        problems.append((key, "unknown key"))
    doc = {k: v for k, v in doc.items() if k in _FIELDS}
    if seed is not None:
        doc["seed"] = seed
    if n_paths is not None:
        doc["n_paths"] = n_paths

    for name in _INT_FIELDS:
        if name in doc:
            _check_number(doc, name, problems, int)
    for name in _FLOAT_FIELDS:
        if name in doc and _check_number(doc, name, problems, (int, float)):
            doc[name] = float(doc[name])
    for name in _TUPLE_FIELDS:
        if doc.get(name) is not None:
            if not isinstance(doc[name], (list, tuple)):
                problems.append((name, "must be a list of numbers"))
            else:
                doc[name] = tuple(float(v) for v in doc[name])
    if problems:
        raise ConfigError(problems)

    cfg = RunConfig(experiment=experiment, **doc)
    problems.extend(_validate(cfg))
    if problems:
        raise ConfigError(problems)
    return cfg


def _validate(cfg):
    problems = []
    if cfg.n < 1:
        problems.append(("n", "must be >= 1"))
    if cfg.seed < 0:
        problems.append(("seed", "must be >= 0"))
    if cfg.n_random < 2:
        problems.append(("n_random", "must be >= 2"))
    if cfg.scheme not in DISCRETIZATION_SCHEMES:
        problems.append(("scheme", f"must be one of {DISCRETIZATION_SCHEMES}"))
    if cfg.scheme == "user-nodes" and not cfg.edges:
        problems.append(("edges", "the user-nodes scheme needs cell edges"))
    for name in ("horizon", "xi_max"):
        value = getattr(cfg, name)
        if value is not None and not (isinstance(value, (int, float)) and value > 0):
            problems.append((name, "must be a number > 0"))
    if not cfg.threshold > 0:
        problems.append(("threshold", "must be > 0"))
    if cfg.distance < 0:
        problems.append(("distance", "must be >= 0"))
    try:
        build_kernel(cfg.kernel)
    except (VolterraLiftError, KeyError, TypeError) as exc:
        problems.append(("kernel", str(exc)))
    try:
        WeightFunction(cfg.weight_p)
    except (VolterraLiftError, TypeError) as exc:
        problems.append(("weight_p", str(exc)))
    try:
        build_coefficients(cfg.coefficients)
    except ConfigError as exc:
        problems.extend(exc.problems)
    except (VolterraLiftError, TypeError, ValueError) as exc:
        problems.append(("coefficients", str(exc)))
    try:
        cfg.sim_config()
    except ConfigError as exc:
        problems.extend((name if name != "scheme" else "lift_scheme", msg) for name, msg in exc.problems)
    for dt in cfg.dts:
        try:
            cfg.sim_config(dt=dt)
        except ConfigError:
            problems.append(("dts", f"{dt} does not divide T={cfg.T}"))
    for name in ("trace_times", "harnack_times"):
        if any(not t > 0 for t in getattr(cfg, name)):
            problems.append((name, "every time must be > 0"))
    witness = cfg.witness if isinstance(cfg.witness, dict) else {}
    unknown = set(witness) - {"t", "epsilon", "cap"}
    if not isinstance(cfg.witness, dict) or unknown:
        problems.append(("witness", "must be an object with keys t, epsilon, cap"))
    elif not (witness.get("t", 1.0) > 0 and witness.get("epsilon", 0.1) > 0):
        problems.append(("witness", "t and epsilon must be > 0"))
    return problems


# ----- BUILDERS -----

def build_measure(cfg):
    """The DiscreteMeasure of the config, or the raw kernel when discretization is switched off."""
    obj = build_kernel(cfg.kernel)
    if isinstance(obj, DiscreteMeasure) or not cfg.discretize:
        return obj
    weight = WeightFunction(cfg.weight_p) if cfg.weight_p is not None else None
    horizon = cfg.T if cfg.horizon is None else cfg.horizon
    return discretize(obj, cfg.n, scheme=cfg.scheme, horizon=horizon, xi_max=cfg.xi_max, edges=cfg.edges,
                      weight=weight)


def _as_measure(obj):
    if isinstance(obj, DiscreteMeasure):
        return obj
    if obj.has_density:
        raise KernelError(f"{obj.variant} kernel has a density; enable discretize to approximate it by nodes")
    return discretize(obj, 1)


def _initial_pair(dm, coeffs, cfg):
    y = LiftState.constant(dm, np.full(coeffs.n, cfg.y0))
    shift = cfg.distance / math.sqrt(coeffs.n * dm.mass_r)
    return y, LiftState.constant(dm, np.full(coeffs.n, cfg.y0 + shift))


@dataclass
class Outcome:
    data: pd.DataFrame
    report: dict
    status: int = EXIT_OK


# ----- EXPERIMENTS -----

def cmd_simulate(cfg, threads=1):
    dm = _as_measure(build_measure(cfg))
    coeffs = build_coefficients(cfg.coefficients)
    sim = cfg.sim_config()
    y0 = LiftState.constant(dm, np.full(coeffs.n, cfg.y0))
    path = dynamics.simulate_lift(dm, coeffs, y0, sim, threads=threads)
    stats = dynamics.ensemble_stats(path)
    report = {
        "nodes": dm.size,
        "mass_r": dm.mass_r,
        "flagged": int(path.flagged.sum()),
        "stats": dynamics.stats_frame(stats).to_dict(orient="list"),
        "apriori": dynamics.apriori_bound_check(path),
    }
    return Outcome(path.to_frame(0), report)


# This function compares mu[Y] with the direct Volterra sum on shared increments.
# Gaussian or matched-drift runs are algebraically exact; others get a dt-refinement table.
def cmd_equivalence(cfg, threads=1):
    target = build_measure(cfg)
    coeffs = build_coefficients(cfg.coefficients)
    exact = coeffs.name == "gaussian" or cfg.matched_drift
    dm = _as_measure(target)
    y0 = LiftState.constant(dm, np.full(coeffs.n, cfg.y0))

    def run(dt):
        sim = cfg.sim_config(dt=dt)
        dW = rng.brownian_increments(sim.seed, np.arange(sim.n_paths), sim.n_steps, coeffs.d, sim.dt)
        direct = dynamics.simulate_svie_direct(target, y0, coeffs, sim, dW, matched_drift=cfg.matched_drift)
        lift = dynamics.simulate_lift(dm, coeffs, y0, sim, dW=dW, threads=threads)
        return lift, direct, dynamics.equivalence_gap(lift, direct)

    if exact:
        lift, direct, gap = run(cfg.dt)
        passed = gap["sup_gap"] < cfg.threshold
        data = pd.DataFrame({"t": lift.times, "X_lift": lift.x[0, :, 0], "X_direct": direct.x[0, :, 0]})
        data["gap"] = np.abs(data["X_lift"] - data["X_direct"])
        report = {"mode": "exact", **gap, "threshold": cfg.threshold, "pass": bool(passed)}
        return Outcome(data, report, EXIT_OK if passed else EXIT_ERROR)

    dts = cfg.dts or tuple(cfg.dt / 2 ** i for i in range(4))
    rows = []
    for dt in dts:
        _, _, gap = run(dt)
        rows.append({"dt": dt, **gap})
    table = pd.DataFrame(rows).sort_values("dt", ascending=False, ignore_index=True)
    decreasing = bool(np.all(np.diff(table["l2_gap"]) <= 0))
    report = {"mode": "refinement", "table": table.to_dict(orient="list"), "decreasing": decreasing,
              "pass": decreasing}
    return Outcome(table, report, EXIT_OK if decreasing else EXIT_SOFT_FAIL)


def _stationarity(dm, t, n_paths, seed):
    gen = rng.path_generator(seed, 0)
    start = gauss.sample_invariant(dm, gen, size=n_paths)
    later = gauss.sample_transition(dm, start, t, gen)
    x0 = start[:, :, 0] @ dm.weights
    xt = later[:, :, 0] @ dm.weights

    def var_and_se(x):
        v = float(np.var(x, ddof=1))
        m4 = float(np.mean((x - x.mean()) ** 4))
        return v, math.sqrt(max(m4 - v ** 2, 0.0) / x.size)

    v0, se0 = var_and_se(x0)
    vt, set_ = var_and_se(xt)
    se = math.hypot(se0, set_)
    return {"t": t, "var_0": v0, "var_t": vt, "stderr": se, "pass": bool(abs(vt - v0) <= MC_SIGMAS * se)}


def cmd_gauss(cfg, threads=1):
    coeffs = build_coefficients(cfg.coefficients)
    if coeffs.n != 1 or coeffs.d != 1:
        raise ConfigError([("coefficients", f"gauss needs n = d = 1, got n={coeffs.n}, d={coeffs.d}")])
    obj = build_kernel(cfg.kernel)
    dm = _as_measure(build_measure(cfg))
    criterion = bool(invariant_criterion(obj))
    witness = cfg.witness or {}
    t_w = float(witness.get("t", 1.0))
    report = {"criterion": criterion, "nodes": dm.size, "mass_r": dm.mass_r}

    if criterion and not dm.has_zero_node:
        report["stationary_variance"] = gauss.stationary_variance(obj)
        report["stationary_variance_discrete"] = gauss.stationary_variance(dm)
        report["trace_limit"] = gauss.trace_limit(dm)
        report["stationarity"] = _stationarity(dm, t_w, cfg.n_paths, cfg.seed)
    else:
        report["note"] = "kernel has no invariant probability measure: invariant analytics skipped"

    trace = pd.DataFrame({"t": list(cfg.trace_times)})
    trace["trace"] = [gauss.trace_qt(dm, t) for t in cfg.trace_times]
    report["trace_curve"] = trace.to_dict(orient="list")
    report["witness"] = gauss.strong_feller_witness(dm, t_w, float(witness.get("epsilon", 0.1)),
                                                    witness.get("cap")).to_dict()
    passed = report.get("stationarity", {"pass": True})["pass"]
    return Outcome(trace, report, EXIT_OK if passed else EXIT_SOFT_FAIL)


def cmd_couple(cfg, threads=1):
    dm = _as_measure(build_measure(cfg))
    coeffs = build_coefficients(cfg.coefficients)
    cc = coupling.coupling_config(dm, coeffs)
    y, ybar = _initial_pair(dm, coeffs, cfg)
    run = coupling.simulate_coupled(dm, coeffs, y, ybar, cc, cfg.sim_config(), threads=threads)
    entropy = coupling.entropy_estimate(run)
    decay = coupling.decay_estimate(run)
    martingale, martingale_ok = coupling.martingale_check(run)

    data = pd.DataFrame({
        "t": run.times,
        "mean_R": martingale["mean_R"],
        "mean_R_stderr": martingale["stderr"],
        "entropy": entropy["curve"]["estimate"],
        "entropy_stderr": entropy["curve"]["stderr"],
        "entropy_bound": entropy["curve"]["bound"],
        "decay": decay["curve"]["estimate"],
        "decay_stderr": decay["curve"]["stderr"],
        "decay_bound": decay["curve"]["bound"],
        "ess": entropy["curve"]["ess"],
    })
    degenerate = entropy["degenerate"] or decay["degenerate"]
    report = {
        "coupling": cc.to_dict(),
        "initial_distance": run.initial_distance,
        "truncated": int(run.flagged.sum()),
        "martingale_pass": martingale_ok,
        "entropy_pass": entropy["pass"],
        "decay_asserted": decay["asserted"],
        "decay_pass": decay["pass"],
        "degenerate": degenerate,
    }
    if not decay["asserted"]:
        report["note"] = "beta = 0: the decay bound is not asserted for this kernel"
    passed = martingale_ok and entropy["pass"] and decay["pass"] and not degenerate
    report["pass"] = passed
    return Outcome(data, report, EXIT_OK if passed else EXIT_SOFT_FAIL)


def cmd_harnack(cfg, threads=1):
    dm = _as_measure(build_measure(cfg))
    coeffs = build_coefficients(cfg.coefficients)
    cc = coupling.coupling_config(dm, coeffs)
    y, ybar = _initial_pair(dm, coeffs, cfg)
    family = [
        coupling.constant_one(),
        coupling.capped_distance(y, cap=1.0),
        coupling.exp_linear(LiftState.constant(dm, np.full(coeffs.n, 0.5 / math.sqrt(coeffs.n * dm.mass_r)))),
    ]
    sim = cfg.sim_config(T=max(cfg.harnack_times))
    table = coupling.harnack_check(family, y, ybar, cfg.harnack_times, dm, coeffs, cc, sim, threads=threads)
    passed = bool(table["pass"].all())
    report = {"coupling": cc.to_dict(), "rows": len(table), "pass": passed,
              "min_margin_sigmas": float(table["margin_sigmas"].min())}
    return Outcome(table, report, EXIT_OK if passed else EXIT_SOFT_FAIL)


def cmd_validate(cfg, threads=1):
    results = checks.run_suite(seed=cfg.seed, n_random=cfg.n_random,
                               perturb_norm_weight=cfg.perturb_norm_weight)
    passed = all(r.passed for r in results)
    report = {
        "pass": passed,
        "checks": {r.name: {"passed": r.passed, "count": r.count, "worst": r.worst} for r in results},
    }
    return Outcome(checks.results_frame(results), report, EXIT_OK if passed else EXIT_ERROR)


COMMANDS = {
    "simulate": cmd_simulate,
    "equivalence": cmd_equivalence,
    "gauss": cmd_gauss,
    "couple": cmd_couple,
    "harnack": cmd_harnack,
    "validate": cmd_validate,
}


# ----- OUTPUT -----

def run_directory(out, cfg):
    return Path(out) / cfg.experiment / io.config_hash(cfg.to_dict())


def write_outputs(run_dir, cfg, outcome, wall_time):
    data_path = io.write_csv(Path(run_dir) / "data.csv", outcome.data)
    report_path = io.write_json(Path(run_dir) / "report.json", outcome.report)
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": io.config_hash(cfg.to_dict()),
        "tool_version": TOOL_VERSION,
        "seed": cfg.seed,
        "wall_time": wall_time,
        "outputs": {
            "data.csv": io.file_digest(data_path),
            "report.json": io.file_digest(report_path),
        },
    }
    return io.write_json(Path(run_dir) / "manifest.json", manifest)


def build_parser():
    parser = argparse.ArgumentParser(prog="volterra_lift",
                                     description="Simulate and check Markovian lifts of stochastic Volterra equations.")
    parser.add_argument("experiment", choices=EXPERIMENTS)
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--out", default=None, help="output directory (default: $VOLTERRA_LIFT_OUT or runs)")
    parser.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    parser.add_argument("--paths", type=int, default=None, help="overrides the config n_paths")
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument("--quiet", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    configure_logging(args.quiet)
    threads = args.threads if args.threads is not None else default_threads()
    out = args.out if args.out is not None else default_out_dir()

    try:
        doc = load_config_doc(args.config) if args.config else {}
        cfg = build_run_config(doc, args.experiment, seed=args.seed, n_paths=args.paths)
        started = time.perf_counter()
        outcome = COMMANDS[cfg.experiment](cfg, threads=max(1, threads))
        run_dir = run_directory(out, cfg)
        write_outputs(run_dir, cfg, outcome, time.perf_counter() - started)
    except ConfigError as exc:
        for name, message in exc.problems:
            print(f"config error: {name}: {message}", file=sys.stderr)
        return EXIT_ERROR
    except (VolterraLiftError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR

    verdict = {EXIT_OK: "pass", EXIT_SOFT_FAIL: "soft-fail"}.get(outcome.status, "fail")
    summary = f"volterra_lift {cfg.experiment}: {verdict} ({run_dir})"
    print(summary)
    send_slack_message(summary)
    return outcome.status
