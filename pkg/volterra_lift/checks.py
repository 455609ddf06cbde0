"""Deterministic invariant suite run by ``python -m volterra_lift validate``."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .coupling import _tail, compute_lambda, compute_m, compute_xi, m_candidates
from .dynamics import (
    SimConfig,
    gaussian_coefficients,
    picard_residual,
    simulate_lift,
    simulate_svie_direct,
    equivalence_gap,
    stochastic_convolution,
    volterra_sum,
)
from .gauss import qt_apply, trace_limit, trace_qt
from .kernels import ExponentialSum, Fractional, Gamma, discretize
from .liftspace import (
    LiftState,
    eps_M_constant,
    generator_apply,
    h_norm_sq,
    h_weights,
    inner_h,
    mu_integral,
    semigroup_apply,
    v_norm_sq,
    vstar_norm_sq,
    weighted_sq,
)

logger = logging.getLogger(__name__)

REL_TOL = 1e-12


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    count: int
    worst: float
    detail: str = ""


def builtin_measures():
    return {
        "exponential_sum": discretize(ExponentialSum((0.5, 2.0, 8.0, 30.0), (1.0, 0.5, 0.25, 0.1)), 1),
        "gamma": discretize(Gamma(0.7, 1.0), 50, horizon=1.0),
        "fractional": discretize(Fractional(0.75), 30, horizon=1.0),
    }


def _random_states(dm, gen, count, n=1):
    scales = gen.lognormal(0.0, 1.0, size=(count, 1, 1))
    return gen.standard_normal((count, dm.size, n)) * scales


def _rel(residual, scale):
    return np.abs(residual) / np.maximum(np.abs(scale), 1e-300)


# ----- CHECKS -----

def check_duality(dm, values, perturb_norm_weight=0.0):
    """<Ay, y>_H = -|y|_V^2 + |y|_H^2; ``perturb_norm_weight`` skews the V weights."""
    ay = -dm.nodes[None, :, None] * values
    lhs = np.einsum("pin,pin,i->p", ay, values, h_weights(dm))
    v_w = dm.weights * (dm.nodes + 1.0) * dm.r_values * (1.0 + perturb_norm_weight)
    h2 = h_norm_sq(values, dm)
    rhs = -weighted_sq(values, v_w) + h2
    return float(np.max(_rel(lhs - rhs, v_norm_sq(values, dm))))


def check_norm_ordering(dm, values):
    h = h_norm_sq(values, dm)
    v = v_norm_sq(values, dm)
    vs = vstar_norm_sq(values, dm)
    return float(np.max(np.maximum(vs - h, h - v) / np.maximum(v, 1e-300)))


def check_mu_bound(dm, values):
    mu = np.linalg.norm(mu_integral(values, dm), axis=-1)
    bound = np.sqrt(dm.mass_r * v_norm_sq(values, dm))
    return float(np.max((mu - bound) / np.maximum(bound, 1e-300)))


def check_semigroup(dm, values, s=0.3, t=0.7):
    worst = 0.0
    for row in values:
        y = LiftState(row, dm)
        two_step = semigroup_apply(semigroup_apply(y, s), t).values
        one_step = semigroup_apply(y, s + t).values
        scale = np.max(np.abs(row))
        worst = max(worst, float(np.max(np.abs(two_step - one_step)) / scale))
        grown = h_norm_sq(semigroup_apply(y, t)) - h_norm_sq(y)
        worst = max(worst, float(grown / h_norm_sq(y)))
    return worst


def check_generator_contraction(dm, values):
    worst = 0.0
    for row in values:
        y = LiftState(row, dm)
        excess = vstar_norm_sq(generator_apply(y)) - v_norm_sq(y)
        worst = max(worst, float(excess / v_norm_sq(y)))
    return worst


def check_eps_m(dm, values, eps=0.1):
    m, M = eps_M_constant(dm, eps)
    lhs = (np.linalg.norm(values, axis=-1) @ dm.weights) ** 2
    rhs = eps * v_norm_sq(values, dm) + M * h_norm_sq(values, dm)
    return float(np.max((lhs - rhs) / rhs))


def check_convolution(dm, gen, steps=100, dt=0.01):
    sigma = gen.standard_normal((2, steps, 1, 1))
    dW = gen.standard_normal((2, steps, 1)) * np.sqrt(dt)
    conv = stochastic_convolution(dm, sigma, dW, dt)
    direct = volterra_sum(dm, sigma, dW, dt)
    lifted = mu_integral(conv, dm)
    scale = max(1.0, float(np.max(np.abs(direct))))
    return float(np.max(np.abs(lifted - direct)) / scale)


def check_equivalence(dm, seed, steps=1000):
    coeffs = gaussian_coefficients(1)
    cfg = SimConfig(T=steps * 1e-3, dt=1e-3, n_paths=2, seed=seed)
    y0 = LiftState.zeros(dm, 1)
    lift = simulate_lift(dm, coeffs, y0, cfg)
    direct = simulate_svie_direct(dm, y0, coeffs, cfg, lift)
    return equivalence_gap(lift, direct)["sup_gap"]


def check_picard_fixed_point(dm, seed):
    coeffs = gaussian_coefficients(1)
    cfg = SimConfig(T=0.5, dt=0.01, n_paths=1, seed=seed)
    path = simulate_lift(dm, coeffs, LiftState.constant(dm, 0.5), cfg, store_lift=True)
    return picard_residual(dm, coeffs, path)


def check_qt_symmetry(dm, values, t=0.5):
    worst = 0.0
    for a, b in zip(values[::2], values[1::2]):
        y1, y2 = LiftState(a, dm), LiftState(b, dm)
        left = inner_h(qt_apply(dm, t, y1), y2)
        right = inner_h(y1, qt_apply(dm, t, y2))
        scale = t * dm.mass_r * np.sqrt(h_norm_sq(y1) * h_norm_sq(y2))
        worst = max(worst, float(abs(left - right) / scale))
    return worst


def check_trace_limit(dm):
    if dm.has_zero_node:
        positive = dm.nodes[dm.nodes > 0]
        t = 50.0 / positive.min() if positive.size else 1.0
        slope = trace_qt(dm, t + 1.0) - trace_qt(dm, t)
        zero_weight = dm.weights[0] * dm.r_values[0]
        return abs(slope - zero_weight) / zero_weight
    t = 50.0 / dm.nodes[0]
    return abs(trace_qt(dm, t) - trace_limit(dm)) / trace_limit(dm)


def check_coupling_constants(dm, L=0.5):
    m = compute_m(dm, L)
    scale = 2.0 * L ** 2 * (1.0 + dm.mass_r)
    violation = max(0.0, scale * _tail(dm, m) - 1.0)
    smaller = [c for c in m_candidates(dm) if c < m and scale * _tail(dm, c) <= 1.0]
    lam = compute_lambda(dm, L, m)
    xi = compute_xi(dm, L, m, lam)
    return violation + len(smaller) + abs(xi - lam) / lam


# This function runs every check on every built-in measure.
# With perturb_norm_weight != 0 the duality check is expected to fail.
def run_suite(seed=0, n_random=100, perturb_norm_weight=0.0):
    gen = np.random.default_rng(seed)
    results = []

    def record(name, worst, tol, count):
        results.append(CheckResult(name, bool(worst <= tol), count, float(worst)))

    for label, dm in builtin_measures().items():
        values = _random_states(dm, gen, n_random)
        record(f"{label}/duality", check_duality(dm, values, perturb_norm_weight), REL_TOL, n_random)
        record(f"{label}/norm_ordering", check_norm_ordering(dm, values), REL_TOL, n_random)
        record(f"{label}/mu_bound", check_mu_bound(dm, values), REL_TOL, n_random)
        record(f"{label}/semigroup", check_semigroup(dm, values), REL_TOL, n_random)
        record(f"{label}/generator_contraction", check_generator_contraction(dm, values), REL_TOL, n_random)
        record(f"{label}/eps_M", check_eps_m(dm, values), REL_TOL, n_random)
        record(f"{label}/convolution", check_convolution(dm, gen), REL_TOL, 2)
        record(f"{label}/equivalence", check_equivalence(dm, seed), 1e-10, 2)
        record(f"{label}/picard_fixed_point", check_picard_fixed_point(dm, seed), 1e-10, 1)
        record(f"{label}/qt_symmetry", check_qt_symmetry(dm, values), REL_TOL, n_random // 2)
        record(f"{label}/trace_limit", check_trace_limit(dm), 1e-8, 1)
        record(f"{label}/coupling_constants", check_coupling_constants(dm), REL_TOL, 1)

    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.warning("validate: %d of %d checks failed: %s", len(failed), len(results), ", ".join(failed))
    return results


def results_frame(results):
    return pd.DataFrame([r.__dict__ for r in results])
