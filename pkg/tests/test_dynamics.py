import math

import numpy as np
import pytest

from volterra_lift import rng
from volterra_lift.dynamics import (
    SimConfig,
    affine_coefficients,
    apriori_bound_check,
    apriori_refinement,
    ensemble_stats,
    equivalence_gap,
    gaussian_coefficients,
    picard_residual,
    picard_solve,
    simulate_lift,
    simulate_svie_direct,
    smooth_coefficients,
    step_lift,
    stochastic_convolution,
    volterra_sum,
    zero_coefficients,
)
from volterra_lift.errors import CoefficientError, ConfigError, KernelError, VolterraLiftError
from volterra_lift.gauss import discrete_ito_variance, sample_invariant, stationary_variance
from volterra_lift.kernels import DiscreteMeasure, ExponentialSum, Gamma, discretize
from volterra_lift.liftspace import LiftState, mu_integral


def _increments(cfg, d=1):
    return rng.brownian_increments(cfg.seed, np.arange(cfg.n_paths), cfg.n_steps, d, cfg.dt)


# ----- CONFIG AND COEFFICIENTS -----

def test_dt_must_divide_horizon():
    with pytest.raises(ConfigError) as info:
        SimConfig(T=1.0, dt=0.3)
    fields = {name for name, _ in info.value.problems}
    assert {"T", "dt"} <= fields


def test_sim_config_grid():
    cfg = SimConfig(T=0.5, dt=0.1)
    assert cfg.n_steps == 5
    assert np.allclose(cfg.times, [0.0, 0.1, 0.2, 0.3, 0.4, 0.5])
    with pytest.raises(ConfigError):
        SimConfig(T=1.0, dt=0.1, scheme="milstein")


def test_affine_coefficients():
    coeffs = affine_coefficients([[-0.5]], b0=[1.0], S0=[[2.0]])
    x = np.array([[1.0], [3.0]])
    assert np.allclose(coeffs.drift(x), [[0.5], [-0.5]])
    assert np.allclose(coeffs.diffusion(x), 2.0)
    assert coeffs.lipschitz == pytest.approx(0.5)
    assert coeffs.sigma_inv_sup == pytest.approx(0.5)
    with pytest.raises(CoefficientError):
        affine_coefficients([[1.0, 0.0]])


def test_smooth_coefficients_inverse():
    coeffs = smooth_coefficients(0.0, 0.5, 1.0, 0.4)
    x = np.array([[-2.0], [0.0], [5.0]])
    product = np.einsum("pnd,pdm->pnm", coeffs.diffusion(x), coeffs.diffusion_inverse(x))
    assert np.allclose(product, 1.0)
    assert coeffs.sigma_inv_sup == pytest.approx(1.0 / 0.6)
    with pytest.raises(CoefficientError):
        smooth_coefficients(0.0, 0.5, 1.0, 1.0)


def test_zero_coefficients_have_no_inverse():
    with pytest.raises(CoefficientError):
        zero_coefficients().diffusion_inverse(np.zeros((1, 1)))


# ----- STEPPING -----

def test_one_exact_step():
    dm = DiscreteMeasure(np.array([1.0]), np.array([1.0]))
    y = step_lift(LiftState.constant(dm, 1.0), np.zeros(1), np.eye(1), np.array([0.1]), 0.1)
    assert y.values[0, 0] == pytest.approx(math.exp(-0.1) * 1.1, rel=1e-15)


def test_one_euler_step():
    dm = DiscreteMeasure(np.array([2.0]), np.array([1.0]))
    y = step_lift(LiftState.constant(dm, 1.0), np.array([0.5]), np.eye(1), np.array([0.1]), 0.1, "full-euler")
    assert y.values[0, 0] == pytest.approx(0.8 + 0.05 + 0.1, rel=1e-15)


def test_zero_noise_zero_drift_is_the_semigroup(exp_measure):
    cfg = SimConfig(T=1.0, dt=0.01, n_paths=1)
    y0 = LiftState.constant(exp_measure, 1.0)
    path = simulate_lift(exp_measure, zero_coefficients(), y0, cfg)
    assert np.allclose(path.final[0, :, 0], np.exp(-exp_measure.nodes), rtol=1e-12)


# ----- SIMULATION -----

def test_simulation_is_reproducible_and_batch_independent(exp_measure):
    cfg = SimConfig(T=0.2, dt=0.01, n_paths=7, seed=3)
    y0 = LiftState.zeros(exp_measure)
    coeffs = affine_coefficients([[-0.5]], S0=[[1.0]], S1=[[0.2]])
    first = simulate_lift(exp_measure, coeffs, y0, cfg)
    again = simulate_lift(exp_measure, coeffs, y0, cfg, threads=2, batch_size=3)
    assert np.array_equal(first.x, again.x)
    other = simulate_lift(exp_measure, coeffs, y0, SimConfig(T=0.2, dt=0.01, n_paths=7, seed=4))
    assert not np.array_equal(first.x, other.x)


def test_path_frame_columns(exp_measure):
    cfg = SimConfig(T=0.1, dt=0.01, n_paths=2)
    path = simulate_lift(exp_measure, gaussian_coefficients(), LiftState.zeros(exp_measure), cfg, store_lift=True)
    assert list(path.to_frame().columns) == ["t", "X"]
    assert len(path.to_frame(with_lift=True).columns) == 2 + exp_measure.size
    assert np.allclose(mu_integral(path.lift_state(5, 1)), path.x[1, 5])


def test_lift_state_needs_stored_lift(exp_measure):
    cfg = SimConfig(T=0.1, dt=0.01)
    path = simulate_lift(exp_measure, gaussian_coefficients(), LiftState.zeros(exp_measure), cfg)
    with pytest.raises(VolterraLiftError):
        path.lift_state(1)


def test_blown_up_paths_are_flagged(exp_measure):
    cfg = SimConfig(T=0.05, dt=0.01, n_paths=3)
    path = simulate_lift(exp_measure, affine_coefficients([[1e200]]), LiftState.constant(exp_measure, 1.0), cfg)
    assert path.flagged.all()
    with pytest.raises(VolterraLiftError):
        ensemble_stats(path)


def test_dimension_mismatch_rejected(exp_measure):
    cfg = SimConfig(T=0.1, dt=0.01)
    with pytest.raises(CoefficientError):
        simulate_lift(exp_measure, gaussian_coefficients(2), LiftState.zeros(exp_measure), cfg)


def test_gaussian_variance_matches_ito_isometry(exp_measure):
    cfg = SimConfig(T=1.0, dt=2.0 ** -10, n_paths=10_000, seed=7)
    path = simulate_lift(exp_measure, gaussian_coefficients(), LiftState.zeros(exp_measure), cfg)
    stats = ensemble_stats(path)
    assert stats["var"][0, 0] == 0.0
    for t in (0.25, 0.5, 1.0):
        k = int(round(t / cfg.dt))
        expected = discrete_ito_variance(exp_measure, t, cfg.dt)
        assert abs(stats["var"][k, 0] - expected) <= 3.0 * stats["var_stderr"][k, 0]


def test_stationary_start_stays_stationary(two_node_measure):
    P = 4000
    start = sample_invariant(two_node_measure, np.random.default_rng(5), size=P)
    cfg = SimConfig(T=1.0, dt=1e-3, n_paths=P, seed=11)
    path = simulate_lift(two_node_measure, gaussian_coefficients(), start, cfg)
    stats = ensemble_stats(path)
    target = stationary_variance(two_node_measure)
    for k in (0, cfg.n_steps):
        assert abs(stats["var"][k, 0] - target) <= 3.0 * stats["var_stderr"][k, 0] + 0.01 * target


# ----- EQUIVALENCE -----

def test_equivalence_exact_for_gaussian_configuration():
    k = ExponentialSum(tuple(np.geomspace(0.1, 100.0, 20)), tuple(np.full(20, 0.05)))
    dm = discretize(k, 20)
    cfg = SimConfig(T=1.0, dt=1e-3, n_paths=2, seed=1)
    y0 = LiftState.constant(dm, 0.3)
    lift = simulate_lift(dm, gaussian_coefficients(), y0, cfg)
    direct = simulate_svie_direct(k, y0, gaussian_coefficients(), cfg, lift)
    assert equivalence_gap(lift, direct)["sup_gap"] < 1e-10


def test_equivalence_exact_for_full_euler(exp_measure):
    cfg = SimConfig(T=1.0, dt=0.01, n_paths=3, seed=2, scheme="full-euler")
    coeffs = affine_coefficients([[-0.5]], b0=[0.2], S0=[[1.0]], S1=[[0.3]])
    y0 = LiftState.constant(exp_measure, 0.5)
    lift = simulate_lift(exp_measure, coeffs, y0, cfg)
    direct = simulate_svie_direct(exp_measure, y0, coeffs, cfg, lift.dW)
    assert equivalence_gap(lift, direct)["sup_gap"] < 1e-9


def test_matched_drift_makes_equivalence_exact(exp_measure):
    cfg = SimConfig(T=1.0, dt=0.01, n_paths=3, seed=2)
    coeffs = affine_coefficients([[-0.5]], b0=[0.2], S0=[[1.0]], S1=[[0.3]])
    y0 = LiftState.constant(exp_measure, 0.5)
    lift = simulate_lift(exp_measure, coeffs, y0, cfg)
    direct = simulate_svie_direct(exp_measure, y0, coeffs, cfg, lift, matched_drift=True)
    assert equivalence_gap(lift, direct)["sup_gap"] < 1e-9


def test_left_point_drift_gap_shrinks_with_dt(exp_measure):
    coeffs = affine_coefficients([[-0.5]], b0=[1.0], S0=[[0.3]])
    y0 = LiftState.zeros(exp_measure)
    gaps = []
    for dt in (0.04, 0.02, 0.01):
        cfg = SimConfig(T=1.0, dt=dt, n_paths=50, seed=5)
        dW = _increments(cfg)
        lift = simulate_lift(exp_measure, coeffs, y0, cfg, dW=dW)
        direct = simulate_svie_direct(exp_measure, y0, coeffs, cfg, dW)
        gaps.append(equivalence_gap(lift, direct)["l2_gap"])
    assert gaps[0] > gaps[1] > gaps[2] > 0


def test_direct_scheme_needs_discretized_kernel():
    cfg = SimConfig(T=0.1, dt=0.01)
    dm = discretize(Gamma(0.7, 1.0), 5)
    with pytest.raises(KernelError):
        simulate_svie_direct(Gamma(0.7, 1.0), LiftState.zeros(dm), gaussian_coefficients(), cfg, _increments(cfg))


def test_stochastic_convolution_matches_volterra_sum(gamma_measure, gen):
    sigma = gen.standard_normal((3, 100, 1, 1))
    dW = gen.standard_normal((3, 100, 1)) * 0.1
    conv = stochastic_convolution(gamma_measure, sigma, dW, 0.01)
    direct = volterra_sum(gamma_measure, sigma, dW, 0.01)
    assert conv.shape == (3, 101, gamma_measure.size, 1)
    assert np.max(np.abs(mu_integral(conv, gamma_measure) - direct)) < 1e-12 * max(1.0, np.max(np.abs(direct)))


# ----- PICARD -----

def test_picard_reproduces_the_scheme_for_additive_noise(exp_measure):
    cfg = SimConfig(T=0.5, dt=0.01, n_paths=1, seed=3)
    y0 = LiftState.constant(exp_measure, 0.5)
    path, report = picard_solve(exp_measure, gaussian_coefficients(), y0, cfg)
    assert report.converged
    assert report.kappa == 0.0
    lift = simulate_lift(exp_measure, gaussian_coefficients(), y0, cfg)
    assert np.allclose(path.x, lift.x, rtol=0.0, atol=1e-12)


def test_picard_converges_for_lipschitz_coefficients(exp_measure):
    cfg = SimConfig(T=0.5, dt=0.01, n_paths=1, seed=4)
    coeffs = affine_coefficients([[-0.5]], S0=[[1.0]], S1=[[0.3]])
    path, report = picard_solve(exp_measure, coeffs, LiftState.constant(exp_measure, 0.5), cfg, n_iter=60)
    assert report.converged
    assert report.residual < 1e-8
    gaps = [g for g in report.iterate_gaps if g > 0]
    assert len(gaps) >= 3
    assert all(b < a for a, b in zip(gaps[1:], gaps[2:]))


def test_picard_convergence_is_judged_on_every_grid_time():
    dm = discretize(Gamma(0.7, 1.0), 20)
    coeffs = affine_coefficients([[-2.0]], S0=[[1.0]], S1=[[0.8]])
    cfg = SimConfig(T=0.5, dt=0.01, n_paths=1, seed=11)
    y0 = LiftState.constant(dm, 0.5)
    _, early = picard_solve(dm, coeffs, y0, cfg, n_iter=2)
    assert not early.converged
    assert early.residual > 1e-6
    path, report = picard_solve(dm, coeffs, y0, cfg, n_iter=60)
    assert report.converged
    assert report.residual < 1e-8
    lift = simulate_lift(dm, coeffs, y0, cfg)
    assert np.max(np.abs(path.x - lift.x)) < 1e-8


def test_simulated_path_is_a_picard_fixed_point(exp_measure):
    cfg = SimConfig(T=0.5, dt=0.01, n_paths=2, seed=6)
    coeffs = affine_coefficients([[-0.5]], S0=[[1.0]], S1=[[0.3]])
    path = simulate_lift(exp_measure, coeffs, LiftState.constant(exp_measure, 0.5), cfg, store_lift=True)
    assert picard_residual(exp_measure, coeffs, path, p=1) < 1e-10


# ----- A-PRIORI BOUND -----

def test_apriori_bound_is_stable_under_refinement(exp_measure):
    table, bounded = apriori_refinement(exp_measure, gaussian_coefficients(), LiftState.zeros(exp_measure), 1.0,
                                        (0.02, 0.01, 0.005), n_paths=200, seed=8)
    assert bounded
    assert list(table["dt"]) == [0.02, 0.01, 0.005]


def test_apriori_check_is_finite(exp_measure):
    cfg = SimConfig(T=0.5, dt=0.01, n_paths=100)
    report = apriori_bound_check(simulate_lift(exp_measure, gaussian_coefficients(),
                                               LiftState.constant(exp_measure, 1.0), cfg))
    assert report["finite"]
    assert report["estimate"] >= exp_measure.mass_r
