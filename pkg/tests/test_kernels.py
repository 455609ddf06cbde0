import math

import numpy as np
import pytest
from scipy import special

from volterra_lift.errors import KernelError
from volterra_lift.kernels import (
    Damped,
    DiscreteMeasure,
    ExponentialSum,
    Fractional,
    Gamma,
    Shifted,
    WeightFunction,
    bernstein_measure_density,
    default_weight,
    discretize,
    eval_kernel,
    geometric_edges,
    integrated_kernel,
    invariant_criterion,
    is_regular,
    kernel_from_dict,
    kernel_l2_error,
    measure_from_dict,
    resolving_xi_max,
)


def _power_constant(alpha):
    return 1.0 / (special.gamma(alpha) * special.gamma(1.0 - alpha))


# ----- EVALUATION -----

def test_fractional_kernel_value():
    assert eval_kernel(Fractional(0.75), 1.0) == pytest.approx(1.0 / special.gamma(0.75), rel=1e-14)


def test_gamma_kernel_is_damped_fractional():
    t = np.array([0.1, 0.5, 2.0])
    assert np.allclose(eval_kernel(Gamma(0.7, 1.0), t), np.exp(-t) * eval_kernel(Fractional(0.7), t), rtol=1e-14)


def test_eval_kernel_rejects_nonpositive_time():
    with pytest.raises(KernelError):
        eval_kernel(Fractional(0.75), 0.0)
    with pytest.raises(KernelError):
        eval_kernel(ExponentialSum((1.0,), (1.0,)), [1.0, -1.0])


@pytest.mark.parametrize("alpha", [0.5, 1.0, 0.3, 1.2])
def test_alpha_outside_range_rejected(alpha):
    with pytest.raises(KernelError):
        Gamma(alpha, 1.0)


def test_gamma_needs_positive_beta():
    with pytest.raises(KernelError):
        Gamma(0.7, 0.0)


def test_exponential_sum_merges_duplicate_nodes():
    k = ExponentialSum((2.0, 1.0, 1.0), (1.0, 0.5, 0.5))
    assert k.nodes == (1.0, 2.0)
    assert k.weights == (1.0, 1.0)


def test_exponential_sum_rejects_bad_atoms():
    with pytest.raises(KernelError):
        ExponentialSum((-1.0,), (1.0,))
    with pytest.raises(KernelError):
        ExponentialSum((1.0,), (0.0,))
    with pytest.raises(KernelError):
        ExponentialSum((1.0, 2.0), (1.0,))


def test_shifted_and_damped_kernels():
    base = Gamma(0.7, 1.0)
    assert eval_kernel(Shifted(base, 0.5), 1.0) == pytest.approx(eval_kernel(base, 1.5), rel=1e-14)
    damped = Damped(ExponentialSum((0.0, 1.0), (1.0, 1.0)), 0.5)
    nodes, weights = damped.atoms()
    assert np.allclose(nodes, [0.5, 1.5])
    assert np.allclose(weights, [1.0, 1.0])
    assert eval_kernel(damped, 2.0) == pytest.approx(math.exp(-1.0) * (1.0 + math.exp(-2.0)), rel=1e-14)


def test_bernstein_density_and_atoms():
    atoms = bernstein_measure_density(ExponentialSum((1.0, 3.0), (2.0, 1.0)), 0.0)
    assert atoms == [(1.0, 2.0), (3.0, 1.0)]
    assert bernstein_measure_density(Gamma(0.7, 1.0), 0.5) == 0.0
    expected = _power_constant(0.7) * 1.0 ** -0.7
    assert bernstein_measure_density(Gamma(0.7, 1.0), 2.0) == pytest.approx(expected, rel=1e-14)


@pytest.mark.parametrize("k", [
    Fractional(0.75),
    Gamma(0.7, 1.0),
    ExponentialSum((0.0, 1.0, 5.0), (1.0, 0.5, 0.2)),
    Shifted(Fractional(0.75), 0.1),
    Damped(Gamma(0.7, 1.0), 0.5),
])
def test_kernels_are_positive_and_decreasing(k):
    t = np.geomspace(1e-3, 20.0, 200)
    values = eval_kernel(k, t)
    assert np.all(values >= 0.0)
    assert np.all(np.diff(values) <= 0.0)
    slopes = np.diff(values) / np.diff(t)
    assert np.all(np.diff(slopes) >= -1e-9 * np.abs(slopes[:-1]))


def test_shifted_measure_carries_the_exponential_factor():
    theta = np.array([1.5, 2.0, 3.0, 10.0])
    base = Gamma(0.7, 1.0)
    shifted = bernstein_measure_density(Shifted(base, 0.3), theta)
    assert np.allclose(shifted, np.exp(-0.3 * theta) * bernstein_measure_density(base, theta), rtol=1e-15, atol=0.0)
    ((node, weight),) = bernstein_measure_density(Shifted(ExponentialSum((1.0,), (3.0,)), 2.0), 0.0)
    assert node == 1.0
    assert weight == pytest.approx(3.0 * math.exp(-2.0), rel=1e-15)


# ----- REGULARITY AND WEIGHTS -----

def test_regularity():
    assert is_regular(ExponentialSum((1.0,), (1.0,)))
    assert not is_regular(Fractional(0.75))
    assert not is_regular(Gamma(0.7, 1.0))
    assert is_regular(Shifted(Fractional(0.75), 0.1))
    assert not is_regular(Damped(Fractional(0.75), 1.0))


def test_default_weight_midpoint_rule():
    assert default_weight(Gamma(0.6, 1.0)).p == pytest.approx(2.25)
    assert default_weight(Fractional(0.75)).p == pytest.approx(3.0)
    assert default_weight(ExponentialSum((1.0,), (1.0,))).is_constant
    assert default_weight(Shifted(Fractional(0.75), 0.1)).is_constant


def test_weight_function_values():
    r = WeightFunction(4.0)
    assert np.allclose(r(np.array([0.0, 0.5, 1.0, 16.0])), [1.0, 1.0, 1.0, 0.5])
    with pytest.raises(KernelError):
        WeightFunction(1.5)


@pytest.mark.parametrize("p", [None, 2.0, 2.25, 3.0, 5.0])
def test_weight_function_bounds(p):
    theta = np.array([0.0, 1e-6, 1.0, 1e3])
    r = WeightFunction(p)(theta)
    lower = np.minimum(1.0, np.where(theta > 0, theta, 1.0) ** -0.5)
    assert np.all(lower <= r)
    assert np.all(r <= 1.0)
    assert np.all(np.diff(r) <= 0.0)


def test_invariant_criterion():
    assert not invariant_criterion(Fractional(0.75))
    assert invariant_criterion(Gamma(0.7, 1.0))
    assert not invariant_criterion(ExponentialSum((0.0, 1.0), (1.0, 1.0)))
    assert invariant_criterion(ExponentialSum((0.5,), (1.0,)))
    assert invariant_criterion(Damped(Fractional(0.75), 0.1))
    assert not invariant_criterion(Shifted(Fractional(0.75), 0.1))
    zero_node = DiscreteMeasure(np.array([0.0, 1.0]), np.array([1.0, 1.0]))
    assert not invariant_criterion(zero_node)


# ----- DISCRETIZATION -----

def test_atomic_kernels_discretize_to_their_atoms():
    dm = discretize(ExponentialSum((3.0, 1.0), (0.5, 2.0)), 10)
    assert np.array_equal(dm.nodes, [1.0, 3.0])
    assert np.array_equal(dm.weights, [2.0, 0.5])


def test_geometric_edges_layout():
    edges = geometric_edges(Gamma(0.7, 1.0), 5, horizon=2.0)
    assert edges[0] == 1.0
    assert edges[1] == pytest.approx(1.0 + 1.0 / 20.0)
    assert edges[-1] == pytest.approx(1.0 + 25.0 / 2.0)
    assert edges.size == 6
    assert np.all(np.diff(edges) > 0)


def test_discretized_mass_matches_truncated_measure(gamma_measure):
    # offsets run over [0, n^2 / T] = [0, 2500]
    expected = _power_constant(0.7) * 2500.0 ** 0.3 / 0.3
    assert gamma_measure.size == 50
    assert gamma_measure.weights.sum() == pytest.approx(expected, rel=1e-8)
    assert gamma_measure.nodes[0] > 1.0
    assert np.all(np.diff(gamma_measure.nodes) > 0)


def test_user_nodes_scheme():
    dm = discretize(Gamma(0.7, 1.0), 3, scheme="user-nodes", edges=[1.0, 2.0, 5.0, 10.0])
    assert dm.size == 3
    assert np.all((dm.nodes > [1.0, 2.0, 5.0]) & (dm.nodes < [2.0, 5.0, 10.0]))
    assert dm.weights[0] == pytest.approx(_power_constant(0.7) / 0.3, rel=1e-8)
    with pytest.raises(KernelError):
        discretize(Gamma(0.7, 1.0), 3, scheme="user-nodes")
    with pytest.raises(KernelError):
        discretize(Gamma(0.7, 1.0), 3, scheme="user-nodes", edges=[1.0, 1.0, 2.0])


def test_discretize_validates_arguments():
    with pytest.raises(KernelError):
        discretize(Gamma(0.7, 1.0), 0)
    with pytest.raises(KernelError):
        discretize(Gamma(0.7, 1.0), 10, scheme="uniform")
    with pytest.raises(KernelError):
        discretize(Gamma(0.7, 1.0), 10, horizon=0.0)


def test_gamma_reconstruction_improves_with_n():
    k = Gamma(0.7, 1.0)
    xi_max = resolving_xi_max(1.0)
    coarse = kernel_l2_error(k, discretize(k, 10, horizon=1.0, xi_max=xi_max), 1.0)
    fine = kernel_l2_error(k, discretize(k, 100, horizon=1.0, xi_max=xi_max), 1.0)
    assert fine < 1e-2
    assert fine < coarse


@pytest.mark.parametrize("xi_max", [None, resolving_xi_max(1.0)])
def test_gamma_reconstruction_is_monotone_in_n(xi_max):
    k = Gamma(0.7, 1.0)
    errors = [kernel_l2_error(k, discretize(k, n, horizon=1.0, xi_max=xi_max), 1.0) for n in (10, 30, 100)]
    assert all(b <= 1.05 * a for a, b in zip(errors, errors[1:]))


def test_fractional_reconstruction_with_resolving_range():
    k = Fractional(0.75)
    dm = discretize(k, 100, horizon=1.0, xi_max=resolving_xi_max(1.0))
    assert kernel_l2_error(k, dm, 1.0) < 1e-2


def test_discretized_kernel_pointwise():
    k = Gamma(0.7, 1.0)
    dm = discretize(k, 100, horizon=1.0, xi_max=resolving_xi_max(1.0))
    assert dm.kernel(0.5) == pytest.approx(eval_kernel(k, 0.5), rel=1e-2)


# ----- DISCRETE MEASURE -----

def test_discrete_measure_digest_identity():
    a = DiscreteMeasure(np.array([1.0, 2.0]), np.array([1.0, 0.5]))
    b = DiscreteMeasure(np.array([2.0, 1.0]), np.array([0.5, 1.0]))
    c = DiscreteMeasure(np.array([1.0, 2.0]), np.array([1.0, 0.6]))
    assert a.same_as(b)
    assert not a.same_as(c)
    assert not a.same_as(DiscreteMeasure(np.array([1.0, 2.0]), np.array([1.0, 0.5]), WeightFunction(3.0)))


def test_discrete_measure_arrays_are_read_only():
    dm = DiscreteMeasure(np.array([1.0, 2.0]), np.array([1.0, 0.5]))
    with pytest.raises(ValueError):
        dm.nodes[0] = 5.0


def test_measure_properties():
    dm = DiscreteMeasure(np.array([4.0, 0.5]), np.array([1.0, 2.0]), WeightFunction(2.0))
    assert dm.beta == 0.5
    assert not dm.has_zero_node
    assert dm.mass_r == pytest.approx(2.0 + 0.5)
    assert dm.kernel(0.0) == pytest.approx(3.0)


def test_integrated_kernel():
    dm = DiscreteMeasure(np.array([0.0, 2.0]), np.array([1.0, 1.0]))
    assert integrated_kernel(dm, 1.5) == pytest.approx(1.5 + (1.0 - math.exp(-3.0)) / 2.0, rel=1e-14)


def test_kernel_documents():
    assert ExponentialSum((1.0,), (2.0,)).to_dict()["weight_p"] is None
    k = Shifted(Gamma(0.7, 1.0), 0.5)
    assert kernel_from_dict(k.to_dict()) == k
    dm = discretize(Gamma(0.7, 1.0), 5)
    assert measure_from_dict(dm.to_dict()).same_as(dm)
    with pytest.raises(KernelError):
        kernel_from_dict({"variant": "lognormal"})
