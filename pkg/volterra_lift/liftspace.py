"""The discrete lift space over a DiscreteMeasure.

A lift state stores one R^n vector per node.  Values may carry leading batch
axes, so ``values.shape == (..., nodes, n)``; every norm and map below acts
on the last two axes and broadcasts over the rest.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import MeasureMismatchError, VolterraLiftError
from .kernels import DiscreteMeasure

logger = logging.getLogger(__name__)

EPS_M_TOL = 1e-9


# ----- TYPES -----

@dataclass(frozen=True, eq=False)
class LiftState:
    values: np.ndarray
    dm: DiscreteMeasure

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim < 2 or values.shape[-2] != self.dm.size:
            raise MeasureMismatchError(
                f"state has {values.shape[-2] if values.ndim >= 2 else 0} node rows, measure has {self.dm.size}"
            )
        if not np.all(np.isfinite(values)):
            raise VolterraLiftError("lift state entries must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, dm, n=1):
        return cls(np.zeros((dm.size, int(n))), dm)

    @classmethod
    def constant(cls, dm, b):
        b = np.atleast_1d(np.asarray(b, dtype=float))
        return cls(np.broadcast_to(b, (dm.size, b.size)).copy(), dm)

    @property
    def dim(self):
        return self.values.shape[-1]

    def _other(self, other):
        if isinstance(other, LiftState):
            check_same_measure(self, other)
            if other.values.shape[-1] != self.dim:
                raise MeasureMismatchError("lift states have different state dimensions")
            return other.values
        return NotImplemented

    def __add__(self, other):
        values = self._other(other)
        if values is NotImplemented:
            return values
        return LiftState(self.values + values, self.dm)

    def __sub__(self, other):
        values = self._other(other)
        if values is NotImplemented:
            return values
        return LiftState(self.values - values, self.dm)

    def __mul__(self, scalar):
        if not np.isscalar(scalar):
            return NotImplemented
        return LiftState(self.values * float(scalar), self.dm)

    __rmul__ = __mul__

    def __neg__(self):
        return LiftState(-self.values, self.dm)

    def to_dict(self):
        return {"nodes_ref": self.dm.digest(), "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, doc, dm):
        if doc.get("nodes_ref") != dm.digest():
            raise MeasureMismatchError("lift state document was written for a different measure")
        return cls(np.asarray(doc["values"], dtype=float), dm)


@dataclass(frozen=True)
class NormReport:
    h_norm: float
    v_norm: float
    vstar_norm: float
    l1_mu: float


# ----- HELPERS -----

def check_same_measure(a, b):
    dm_a = a.dm if isinstance(a, LiftState) else a
    dm_b = b.dm if isinstance(b, LiftState) else b
    if not dm_a.same_as(dm_b):
        raise MeasureMismatchError("lift states live on different measures")


def h_weights(dm):
    return dm.weights * dm.r_values


def v_weights(dm):
    return dm.weights * (dm.nodes + 1.0) * dm.r_values


def vstar_weights(dm):
    return dm.weights * dm.r_values / (dm.nodes + 1.0)


def _values(y):
    return y.values if isinstance(y, LiftState) else np.asarray(y, dtype=float)


def weighted_sq(values, node_weights):
    """sum_i w_i |y_i|^2 over the last two axes."""
    return np.einsum("...in,i->...", np.asarray(values) ** 2, node_weights)


def h_norm_sq(y, dm=None):
    dm = y.dm if dm is None else dm
    return weighted_sq(_values(y), h_weights(dm))


def v_norm_sq(y, dm=None):
    dm = y.dm if dm is None else dm
    return weighted_sq(_values(y), v_weights(dm))


def vstar_norm_sq(y, dm=None):
    dm = y.dm if dm is None else dm
    return weighted_sq(_values(y), vstar_weights(dm))


# ----- OPERATIONS -----

def norms(y):
    values = y.values
    if values.ndim > 2:
        raise VolterraLiftError("norms() reports a single state; use h_norm_sq and friends for batches")
    l1 = np.linalg.norm(values, axis=-1) @ y.dm.weights
    return NormReport(
        h_norm=float(np.sqrt(h_norm_sq(y))),
        v_norm=float(np.sqrt(v_norm_sq(y))),
        vstar_norm=float(np.sqrt(vstar_norm_sq(y))),
        l1_mu=float(l1),
    )


def inner_h(y1, y2):
    check_same_measure(y1, y2)
    w = h_weights(y1.dm)
    return np.einsum("...in,...in,i->...", y1.values, y2.values, w)


def mu_integral(y, dm=None):
    dm = y.dm if dm is None else dm
    return np.einsum("...in,i->...n", _values(y), dm.weights)


def forcing(y, t, dm=None):
    """(K y)(t) = sum_i c_i e^{-theta_i t} y_i."""
    if t < 0:
        raise VolterraLiftError("forcing needs t >= 0")
    dm = y.dm if dm is None else dm
    return np.einsum("...in,i->...n", _values(y), dm.weights * np.exp(-dm.nodes * t))


def semigroup_apply(y, t):
    if t < 0:
        raise VolterraLiftError("semigroup_apply needs t >= 0")
    decay = np.exp(-y.dm.nodes * t)
    return LiftState(decay[:, None] * y.values, y.dm)


def generator_apply(y):
    return LiftState(-y.dm.nodes[:, None] * y.values, y.dm)


def weighted_functional(y, node_weights):
    """int w(theta) y(theta) mu(dtheta) for per-node weights w."""
    node_weights = np.asarray(node_weights, dtype=float)
    if isinstance(y, LiftState):
        return np.einsum("...in,i->...n", y.values, y.dm.weights * node_weights)
    raise VolterraLiftError("weighted_functional expects a LiftState")


def _eps_sum(dm, m):
    return float(np.sum(dm.weights / ((dm.nodes + m) * dm.r_values)))


# This function finds (m, M) with |mu[y]|^2 <= eps |y|_V^2 + M |y|_H^2.
# Doubling brackets m, bisection narrows it to EPS_M_TOL.
def eps_M_constant(dm, eps):
    eps = float(eps)
    if not eps > 0:
        raise VolterraLiftError("eps_M_constant needs eps > 0")
    if _eps_sum(dm, 1.0) <= eps:
        return 1.0, 0.0
    lo, hi = 1.0, 2.0
    while _eps_sum(dm, hi) > eps:
        lo, hi = hi, 2.0 * hi
        if not np.isfinite(hi):
            raise VolterraLiftError("eps_M_constant: no admissible m found")
    while hi - lo > EPS_M_TOL * max(1.0, lo):
        mid = 0.5 * (lo + hi)
        if _eps_sum(dm, mid) <= eps:
            hi = mid
        else:
            lo = mid
    return hi, eps * (hi - 1.0)
