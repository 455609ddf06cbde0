"""Completely monotone kernels and their Bernstein measures.

A kernel K(t) = int e^{-theta t} mu(dtheta) is described either in closed
form (fractional, Gamma, shifted, damped) or as a finite exponential sum.
``discretize`` turns any of them into a ``DiscreteMeasure``, the finite
node/weight set every other module computes with.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special

from .errors import KernelError
from .settings import CELL_QUAD_TOL, L2_FLOOR

logger = logging.getLogger(__name__)

SCHEMES = ("geometric", "user-nodes")

# Gauss-Legendre panels used by kernel_l2_error
_L2_PANELS = 400
_L2_ORDER = 8


# ----- WEIGHT FUNCTION -----

@dataclass(frozen=True)
class WeightFunction:
    """r(theta) = 1 wedge theta^(-1/p), or r = 1 when ``p`` is None."""

    p: float | None = None

    def __post_init__(self):
        if self.p is not None:
            p = float(self.p)
            if not math.isfinite(p) or p < 2.0:
                raise KernelError(f"weight exponent p must be finite and >= 2, got {self.p}")
            object.__setattr__(self, "p", p)

    @property
    def is_constant(self):
        return self.p is None

    def __call__(self, theta):
        theta = np.asarray(theta, dtype=float)
        if self.p is None:
            return np.ones_like(theta)
        safe = np.where(theta > 1.0, theta, 1.0)
        return np.where(theta > 1.0, safe ** (-1.0 / self.p), 1.0)


def _midpoint_exponent(alpha):
    upper = 1.0 / (1.0 - alpha)
    return max(2.0, 0.5 * (2.0 + upper))


# ----- KERNELS -----

class Kernel:
    """Common interface of the kernel variants."""

    variant = "kernel"
    has_density = False
    singular_exponent = None

    def __call__(self, t):
        raise NotImplementedError

    def density(self, theta):
        raise KernelError(f"{self.variant} kernel has an atomic measure")

    def regular_part(self, u):
        """density(support_start + u) * u^alpha, finite at u = 0."""
        raise KernelError(f"{self.variant} kernel has no singular density")

    def atoms(self):
        raise KernelError(f"{self.variant} kernel has no atoms; discretize it instead")

    @property
    def support_start(self):
        raise NotImplementedError

    @property
    def regular(self):
        raise NotImplementedError

    @property
    def invariant(self):
        raise NotImplementedError

    def weight(self):
        raise NotImplementedError

    def to_dict(self):
        raise NotImplementedError


def _merge_atoms(nodes, weights):
    nodes = np.asarray(nodes, dtype=float).ravel()
    weights = np.asarray(weights, dtype=float).ravel()
    if nodes.size == 0 or nodes.size != weights.size:
        raise KernelError("nodes and weights must be non-empty and of equal length")
    if not (np.all(np.isfinite(nodes)) and np.all(np.isfinite(weights))):
        raise KernelError("nodes and weights must be finite")
    if np.any(nodes < 0):
        raise KernelError("nodes must be >= 0")
    if np.any(weights <= 0):
        raise KernelError("weights must be > 0")
    unique, inverse = np.unique(nodes, return_inverse=True)
    merged = np.zeros(unique.size)
    np.add.at(merged, inverse, weights)
    return unique, merged


@dataclass(frozen=True)
class ExponentialSum(Kernel):
    nodes: tuple
    weights: tuple

    variant = "exponential_sum"

    def __post_init__(self):
        nodes, weights = _merge_atoms(self.nodes, self.weights)
        object.__setattr__(self, "nodes", tuple(float(x) for x in nodes))
        object.__setattr__(self, "weights", tuple(float(x) for x in weights))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        theta = np.asarray(self.nodes)
        c = np.asarray(self.weights)
        return np.exp(-np.multiply.outer(t, theta)) @ c

    def atoms(self):
        return np.asarray(self.nodes), np.asarray(self.weights)

    @property
    def support_start(self):
        return self.nodes[0]

    @property
    def regular(self):
        return True

    @property
    def invariant(self):
        return self.nodes[0] > 0.0

    def weight(self):
        return WeightFunction()

    def to_dict(self):
        return {"variant": self.variant, "nodes": list(self.nodes), "weights": list(self.weights), "weight_p": None}


def _check_alpha(alpha):
    alpha = float(alpha)
    if not 0.5 < alpha < 1.0:
        raise KernelError(f"alpha must lie in (1/2, 1), got {alpha}")
    return alpha


def _power_constant(alpha):
    return 1.0 / (special.gamma(alpha) * special.gamma(1.0 - alpha))


def _power_density(u, alpha):
    # u^-alpha / (Gamma(alpha) Gamma(1 - alpha)) on u > 0
    u = np.asarray(u, dtype=float)
    const = _power_constant(alpha)
    with np.errstate(divide="ignore"):
        out = np.where(u > 0, const * np.abs(u) ** (-alpha), 0.0)
    return np.where(u == 0, np.inf, out)


@dataclass(frozen=True)
class Fractional(Kernel):
    alpha: float

    variant = "fractional"
    has_density = True

    def __post_init__(self):
        object.__setattr__(self, "alpha", _check_alpha(self.alpha))

    @property
    def singular_exponent(self):
        return self.alpha

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return t ** (self.alpha - 1.0) / special.gamma(self.alpha)

    def density(self, theta):
        return _power_density(theta, self.alpha)

    def regular_part(self, u):
        return np.full_like(np.asarray(u, dtype=float), _power_constant(self.alpha))

    @property
    def support_start(self):
        return 0.0

    @property
    def regular(self):
        return False

    @property
    def invariant(self):
        return False

    def weight(self):
        return WeightFunction(_midpoint_exponent(self.alpha))

    def to_dict(self):
        return {"variant": self.variant, "alpha": self.alpha}


@dataclass(frozen=True)
class Gamma(Kernel):
    alpha: float
    beta: float

    variant = "gamma"
    has_density = True

    def __post_init__(self):
        object.__setattr__(self, "alpha", _check_alpha(self.alpha))
        beta = float(self.beta)
        if not (math.isfinite(beta) and beta > 0):
            raise KernelError(f"Gamma kernel needs beta > 0, got {self.beta}")
        object.__setattr__(self, "beta", beta)

    @property
    def singular_exponent(self):
        return self.alpha

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return np.exp(-self.beta * t) * t ** (self.alpha - 1.0) / special.gamma(self.alpha)

    def density(self, theta):
        theta = np.asarray(theta, dtype=float)
        return np.where(theta >= self.beta, _power_density(theta - self.beta, self.alpha), 0.0)

    def regular_part(self, u):
        return np.full_like(np.asarray(u, dtype=float), _power_constant(self.alpha))

    @property
    def support_start(self):
        return self.beta

    @property
    def regular(self):
        return False

    @property
    def invariant(self):
        return True

    def weight(self):
        return WeightFunction(_midpoint_exponent(self.alpha))

    def to_dict(self):
        return {"variant": self.variant, "alpha": self.alpha, "beta": self.beta}


@dataclass(frozen=True)
class Shifted(Kernel):
    """K(t + delta); measure e^{-delta theta} mu(dtheta), always regular."""

    base: Kernel
    delta: float

    variant = "shifted"

    def __post_init__(self):
        if not isinstance(self.base, Kernel):
            raise KernelError("Shifted needs a Kernel base")
        delta = float(self.delta)
        if not (math.isfinite(delta) and delta > 0):
            raise KernelError(f"shift delta must be > 0, got {self.delta}")
        object.__setattr__(self, "delta", delta)

    @property
    def has_density(self):
        return self.base.has_density

    @property
    def singular_exponent(self):
        return self.base.singular_exponent

    def __call__(self, t):
        return self.base(np.asarray(t, dtype=float) + self.delta)

    def density(self, theta):
        theta = np.asarray(theta, dtype=float)
        return np.exp(-self.delta * theta) * self.base.density(theta)

    def regular_part(self, u):
        u = np.asarray(u, dtype=float)
        return np.exp(-self.delta * (self.support_start + u)) * self.base.regular_part(u)

    def atoms(self):
        nodes, weights = self.base.atoms()
        return nodes, weights * np.exp(-self.delta * nodes)

    @property
    def support_start(self):
        return self.base.support_start

    @property
    def regular(self):
        return True

    @property
    def invariant(self):
        # e^{-delta theta} is ~1 near zero, so the criterion is the base's
        return self.base.invariant

    def weight(self):
        return WeightFunction()

    def to_dict(self):
        return {"variant": self.variant, "delta": self.delta, "base": self.base.to_dict()}


@dataclass(frozen=True)
class Damped(Kernel):
    """e^{-beta t} K(t); the measure is translated by beta."""

    base: Kernel
    beta: float

    variant = "damped"

    def __post_init__(self):
        if not isinstance(self.base, Kernel):
            raise KernelError("Damped needs a Kernel base")
        beta = float(self.beta)
        if not (math.isfinite(beta) and beta > 0):
            raise KernelError(f"damping beta must be > 0, got {self.beta}")
        object.__setattr__(self, "beta", beta)

    @property
    def has_density(self):
        return self.base.has_density

    @property
    def singular_exponent(self):
        return self.base.singular_exponent

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return np.exp(-self.beta * t) * self.base(t)

    def density(self, theta):
        theta = np.asarray(theta, dtype=float)
        shifted = np.where(theta >= self.beta, theta - self.beta, 0.0)
        return np.where(theta >= self.beta, self.base.density(shifted), 0.0)

    def regular_part(self, u):
        return self.base.regular_part(u)

    def atoms(self):
        nodes, weights = self.base.atoms()
        return nodes + self.beta, weights

    @property
    def support_start(self):
        return self.base.support_start + self.beta

    @property
    def regular(self):
        return self.base.regular

    @property
    def invariant(self):
        return True

    def weight(self):
        return self.base.weight()

    def to_dict(self):
        return {"variant": self.variant, "beta": self.beta, "base": self.base.to_dict()}


# ----- DISCRETE MEASURE -----

@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Finite Bernstein measure sum c_i delta_{theta_i} with its weight r."""

    nodes: np.ndarray
    weights: np.ndarray
    r: WeightFunction = field(default_factory=WeightFunction)
    r_values: np.ndarray = field(init=False, repr=False)
    _digest: str = field(init=False, repr=False)

    def __post_init__(self):
        nodes, weights = _merge_atoms(self.nodes, self.weights)
        r_values = self.r(nodes)
        for arr in (nodes, weights, r_values):
            arr.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "r_values", r_values)
        doc = json.dumps(self.to_dict(), sort_keys=True)
        object.__setattr__(self, "_digest", hashlib.sha256(doc.encode()).hexdigest())

    @property
    def size(self):
        return self.nodes.size

    @property
    def mass_r(self):
        return float(np.sum(self.weights * self.r_values))

    @property
    def beta(self):
        return float(self.nodes[0])

    @property
    def has_zero_node(self):
        return self.nodes[0] == 0.0

    def digest(self):
        return self._digest

    def same_as(self, other):
        return self is other or self._digest == other._digest

    def kernel(self, t):
        """K_dm(t) = sum c_i e^{-theta_i t}."""
        t = np.asarray(t, dtype=float)
        return np.exp(-np.multiply.outer(t, self.nodes)) @ self.weights

    def to_dict(self):
        return {
            "variant": "discrete",
            "nodes": [float(x) for x in self.nodes],
            "weights": [float(x) for x in self.weights],
            "weight_p": self.r.p,
        }


# ----- OPERATIONS -----

def eval_kernel(k, t):
    t_arr = np.asarray(t, dtype=float)
    if np.any(~(t_arr > 0)):
        raise KernelError("kernel evaluation needs t > 0")
    value = k(t_arr)
    return float(value) if np.ndim(value) == 0 else value


def bernstein_measure_density(k, theta):
    """Density of mu at theta, or the atom list for atomic measures."""
    if not k.has_density:
        nodes, weights = k.atoms()
        return [(float(a), float(c)) for a, c in zip(nodes, weights)]
    value = k.density(theta)
    return float(value) if np.ndim(value) == 0 else value


def is_regular(k):
    return k.regular


def default_weight(k):
    return k.weight()


def resolving_xi_max(T):
    """Upper node edge resolving the time floor of kernel_l2_error."""
    return 1.0 / (L2_FLOOR * float(T))


def _cell_moments(k, lo, hi):
    s0 = k.support_start
    alpha = k.singular_exponent
    if lo <= s0 and alpha is not None:
        # integrable (theta - s0)^-alpha singularity at the left edge
        def smooth(x):
            return float(k.regular_part(max(x - s0, 0.0)))

        mass, _ = integrate.quad(smooth, s0, hi, weight="alg", wvar=(-alpha, 0.0), epsabs=CELL_QUAD_TOL)
        first, _ = integrate.quad(lambda x: x * smooth(x), s0, hi, weight="alg", wvar=(-alpha, 0.0),
                                  epsabs=CELL_QUAD_TOL)
        return mass, first
    mass, _ = integrate.quad(lambda x: float(k.density(x)), lo, hi, epsabs=CELL_QUAD_TOL, limit=200)
    first, _ = integrate.quad(lambda x: x * float(k.density(x)), lo, hi, epsabs=CELL_QUAD_TOL, limit=200)
    return mass, first


def geometric_edges(k, n, horizon, xi_max=None):
    """Cell edges: [s0, s0+xi_min) then n-1 geometric cells up to s0+xi_max."""
    xi_min = 1.0 / (10.0 * horizon)
    xi_max = float(n) ** 2 / horizon if xi_max is None else float(xi_max)
    if xi_max <= xi_min:
        raise KernelError(f"xi_max={xi_max} must exceed xi_min={xi_min}")
    if n == 1:
        offsets = np.array([0.0, xi_max])
    else:
        offsets = np.concatenate([[0.0], np.geomspace(xi_min, xi_max, n)])
    return k.support_start + offsets


# This function turns a kernel into a finite node/weight set.
# Atomic kernels are returned as they are; density kernels get one node per cell.
def discretize(k, n, scheme="geometric", horizon=1.0, xi_max=None, edges=None, weight=None):
    n = int(n)
    if n < 1:
        raise KernelError("discretize needs n >= 1")
    if not horizon > 0:
        raise KernelError("discretize needs horizon T > 0")
    if scheme not in SCHEMES:
        raise KernelError(f"unknown discretization scheme {scheme!r}; expected one of {SCHEMES}")
    r = weight if weight is not None else k.weight()

    if not k.has_density:
        nodes, weights = k.atoms()
        return DiscreteMeasure(nodes, weights, r)

    if scheme == "user-nodes":
        if edges is None:
            raise KernelError("user-nodes scheme needs explicit cell edges")
        cell_edges = np.asarray(edges, dtype=float)
        if cell_edges.ndim != 1 or cell_edges.size < 2 or np.any(np.diff(cell_edges) <= 0):
            raise KernelError("cell edges must be a strictly increasing list of at least two values")
    else:
        cell_edges = geometric_edges(k, n, horizon, xi_max)

    nodes, weights = [], []
    for lo, hi in zip(cell_edges[:-1], cell_edges[1:]):
        lo = max(lo, k.support_start)
        if hi <= lo:
            continue
        mass, first = _cell_moments(k, lo, hi)
        if not (mass > 0 and math.isfinite(mass)):
            continue
        nodes.append(min(max(first / mass, lo), hi))
        weights.append(mass)
    if not nodes:
        raise KernelError("discretization produced no cell with positive mass")

    dm = DiscreteMeasure(np.array(nodes), np.array(weights), r)
    logger.info("discretized %s kernel: %d nodes on [%.4g, %.4g], mass_r=%.6g",
                k.variant, dm.size, dm.nodes[0], dm.nodes[-1], dm.mass_r)
    return dm


def _l2_grid(T):
    t_min = L2_FLOOR * T
    panel_edges = np.geomspace(t_min, T, _L2_PANELS + 1)
    x, w = np.polynomial.legendre.leggauss(_L2_ORDER)
    lo, hi = panel_edges[:-1, None], panel_edges[1:, None]
    points = 0.5 * (hi - lo) * x[None, :] + 0.5 * (hi + lo)
    weights = 0.5 * (hi - lo) * w[None, :]
    return points.ravel(), weights.ravel()


def kernel_l2_error(k, dm, T):
    """Relative L2(t_min, T) distance between K and its exponential-sum surrogate."""
    if not T > 0:
        raise KernelError("kernel_l2_error needs T > 0")
    t, w = _l2_grid(float(T))
    exact = k(t)
    approx = dm.kernel(t)
    num = np.sum(w * (exact - approx) ** 2)
    den = np.sum(w * exact ** 2)
    return float(np.sqrt(num / den))


def exp_decay_rate(dm):
    return dm.beta


def invariant_criterion(obj):
    if isinstance(obj, DiscreteMeasure):
        return not obj.has_zero_node
    return obj.invariant


def integrated_kernel(dm, t):
    """int_0^t K_dm(s) ds."""
    t = float(t)
    theta = dm.nodes
    safe = np.where(theta > 0, theta, 1.0)
    factor = np.where(theta > 0, -np.expm1(-theta * t) / safe, t)
    return float(factor @ dm.weights)


# ----- SERIALIZATION -----

def kernel_from_dict(doc):
    variant = doc.get("variant")
    if variant == "exponential_sum":
        return ExponentialSum(tuple(doc["nodes"]), tuple(doc["weights"]))
    if variant == "fractional":
        return Fractional(doc["alpha"])
    if variant == "gamma":
        return Gamma(doc["alpha"], doc["beta"])
    if variant == "shifted":
        return Shifted(kernel_from_dict(doc["base"]), doc["delta"])
    if variant == "damped":
        return Damped(kernel_from_dict(doc["base"]), doc["beta"])
    raise KernelError(f"unknown kernel variant {variant!r}")


def measure_from_dict(doc):
    if doc.get("variant") != "discrete":
        raise KernelError("measure document must have variant 'discrete'")
    return DiscreteMeasure(np.asarray(doc["nodes"], dtype=float), np.asarray(doc["weights"], dtype=float),
                           WeightFunction(doc.get("weight_p")))
