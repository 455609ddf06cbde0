"""Closed-form analytics of the Gaussian lift (b = 0, sigma = 1, n = d = 1).

Covariances are node-indexed matrices.  ``G_ij = (1 - e^{-(th_i+th_j)t})/(th_i+th_j)``
is the coordinate covariance of Y_t started at zero; the covariance operator
acts on a lift state through the H-pairing, (Q y)_i = sum_j G_ij c_j r_j y_j.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import integrate, linalg, special

from .errors import CovarianceError, KernelError, NoInvariantMeasureError, VolterraLiftError
from .kernels import DiscreteMeasure, Gamma, Kernel, discretize
from .liftspace import LiftState, check_same_measure, h_weights
from .settings import CHOLESKY_JITTER

logger = logging.getLogger(__name__)


# ----- COVARIANCE OPERATORS -----

@dataclass(frozen=True, eq=False)
class CovarianceOperator:
    matrix: np.ndarray
    dm: DiscreteMeasure
    flavor: str
    t: float | None = None

    def apply(self, y):
        check_same_measure(y, self.dm)
        weighted = self.matrix * h_weights(self.dm)[None, :]
        return LiftState(np.einsum("ij,...jn->...in", weighted, y.values), self.dm)

    def to_frame(self):
        labels = [f"{x:.17g}" for x in self.dm.nodes]
        return pd.DataFrame(self.matrix, index=labels, columns=labels)


def _pair_sums(dm):
    return dm.nodes[:, None] + dm.nodes[None, :]


def _require_invariant(dm):
    if dm.has_zero_node:
        raise NoInvariantMeasureError(
            "measure has an atom at theta = 0: the Gaussian lift has no invariant probability measure"
        )


def qt_matrix(dm, t):
    if t < 0:
        raise VolterraLiftError("Q_t needs t >= 0")
    s = _pair_sums(dm)
    safe = np.where(s > 0, s, 1.0)
    return np.where(s > 0, -np.expm1(-s * t) / safe, float(t))


def q_inf_matrix(dm):
    _require_invariant(dm)
    return 1.0 / _pair_sums(dm)


def covariance_operator(dm, t=None):
    if t is None:
        return CovarianceOperator(q_inf_matrix(dm), dm, "Qinf")
    return CovarianceOperator(qt_matrix(dm, t), dm, "Qt", float(t))


def qt_apply(dm, t, y):
    return covariance_operator(dm, t).apply(y)


def q_inf_apply(dm, y):
    return covariance_operator(dm).apply(y)


def trace_qt(dm, t):
    """Tr Q_t = t mu({0}) + sum c r (1 - e^{-2 theta t}) / (2 theta)."""
    if t < 0:
        raise VolterraLiftError("trace_qt needs t >= 0")
    theta = dm.nodes
    safe = np.where(theta > 0, theta, 1.0)
    factor = np.where(theta > 0, -np.expm1(-2.0 * theta * t) / (2.0 * safe), float(t))
    return float(np.sum(h_weights(dm) * factor))


def trace_limit(dm):
    _require_invariant(dm)
    return float(np.sum(h_weights(dm) / (2.0 * dm.nodes)))


# ----- VARIANCES -----

def _gamma_stationary_variance(k):
    a, b = k.alpha, k.beta
    return float(special.gamma(2 * a - 1) / (special.gamma(a) ** 2 * (2 * b) ** (2 * a - 1)))


def stationary_variance(obj, method="closed"):
    """int_0^inf K(s)^2 ds, the variance of the stationary Volterra process."""
    if isinstance(obj, DiscreteMeasure):
        _require_invariant(obj)
        c = obj.weights
        return float(c @ (1.0 / _pair_sums(obj)) @ c)
    if not isinstance(obj, Kernel):
        raise KernelError("expected a Kernel or DiscreteMeasure")
    if not obj.invariant:
        raise NoInvariantMeasureError(f"{obj.variant} kernel has no invariant probability measure")
    if not obj.has_density:
        return stationary_variance(discretize(obj, 1))
    if method == "closed" and isinstance(obj, Gamma):
        return _gamma_stationary_variance(obj)
    head, _ = integrate.quad(lambda s: float(obj(s)) ** 2, 0.0, 1.0, limit=200)
    tail, _ = integrate.quad(lambda s: float(obj(s)) ** 2, 1.0, np.inf, limit=200)
    return head + tail


def forcing_variance(dm, t):
    """int_0^inf K(t + s)^2 ds for the discretized kernel."""
    _require_invariant(dm)
    if t < 0:
        raise VolterraLiftError("forcing_variance needs t >= 0")
    s = _pair_sums(dm)
    c = dm.weights
    return float(c @ (np.exp(-s * t) / s) @ c)


def ito_variance(dm, t):
    """Var X_t for zero forcing: sum c_i c_j (1 - e^{-(th_i+th_j)t}) / (th_i+th_j)."""
    c = dm.weights
    return float(c @ qt_matrix(dm, t) @ c)


def discrete_ito_variance(dm, t, dt):
    """sum_{j<k} K(t_k - t_j)^2 dt, the variance of the left-point scheme at t = k dt."""
    k = int(round(t / dt))
    lags = np.arange(1, k + 1) * dt
    return float(np.sum(dm.kernel(lags) ** 2) * dt)


def volterra_covariance(k_or_dm, s, t):
    """Cov(X_s, X_t) = int_0^{s^t} K(s-u) K(t-u) du for the zero-forcing Gaussian case."""
    if not (s > 0 and t > 0):
        raise VolterraLiftError("volterra_covariance needs s, t > 0")
    if isinstance(k_or_dm, Kernel):
        if k_or_dm.has_density:
            raise KernelError("discretize the kernel before computing node covariances")
        dm = discretize(k_or_dm, 1)
    else:
        dm = k_or_dm
    m = min(s, t)
    theta = dm.nodes
    pair = _pair_sums(dm)
    upper = np.exp(-np.add.outer(theta * (s - m), theta * (t - m)))
    lower = np.exp(-np.add.outer(theta * s, theta * t))
    safe = np.where(pair > 0, pair, 1.0)
    block = np.where(pair > 0, (upper - lower) / safe, m)
    c = dm.weights
    return float(c @ block @ c)


# ----- SAMPLING -----

def _scaled_cholesky(cov):
    scale = np.sqrt(np.diag(cov))
    corr = cov / np.outer(scale, scale)
    corr = corr + CHOLESKY_JITTER * np.eye(corr.shape[0])
    try:
        chol = linalg.cholesky(corr, lower=True)
    except linalg.LinAlgError as exc:
        raise CovarianceError(
            "node covariance is numerically singular; merge nodes that are too close together"
        ) from exc
    return scale[:, None] * chol


def _draw(factor, rng, size, n):
    z = rng.standard_normal((size, factor.shape[0], n))
    return np.einsum("ij,pjn->pin", factor, z)


# This function samples the invariant law N(0, Q) on node coordinates.
# Coordinate covariance is 1/(theta_i + theta_j); components are independent.
def sample_invariant(dm, rng, size=None, n=1):
    _require_invariant(dm)
    factor = _scaled_cholesky(q_inf_matrix(dm))
    values = _draw(factor, rng, 1 if size is None else int(size), n)
    return LiftState(values[0], dm) if size is None else values


def sample_transition(dm, y, t, rng):
    """Draw from P_t(y, .) = N(e^{-theta t} y, Q_t) for each state in y."""
    values = y.values if isinstance(y, LiftState) else np.asarray(y, dtype=float)
    single = values.ndim == 2
    batch = values[None] if single else values
    mean = np.exp(-dm.nodes * t)[:, None] * batch
    if t == 0:
        out = mean
    else:
        factor = _scaled_cholesky(qt_matrix(dm, t))
        out = mean + _draw(factor, rng, batch.shape[0], batch.shape[-1])
    if single:
        return LiftState(out[0], dm) if isinstance(y, LiftState) else out[0]
    return out


# ----- STRONG FELLER WITNESS -----

@dataclass(frozen=True, eq=False)
class WitnessReport:
    y_eps: LiftState
    band: tuple
    ratio: float
    achievable: bool
    t: float
    epsilon: float
    cap: float
    band_mass: float
    band_bound: float
    mass_bound: float

    def to_dict(self):
        return {
            "t": self.t,
            "epsilon": self.epsilon,
            "band": [int(self.band[0]), int(self.band[1])],
            "ratio": self.ratio,
            "achievable": self.achievable,
            "cap": self.cap,
            "band_mass": self.band_mass,
            "band_bound": self.band_bound,
            "mass_bound": self.mass_bound,
        }


def _growth(M, t):
    # (e^{2Mt} - 1) / (2M), limit t at M = 0
    if M == 0:
        return float(t)
    if 2.0 * M * t > 700.0:
        return math.inf
    return math.expm1(2.0 * M * t) / (2.0 * M)


def _mass_bound(M, t, eps):
    # 2 M eps^2 / (e^{2Mt} - 1)
    return eps ** 2 / _growth(M, t)


def band_ratio(dm, t, i0, i1):
    """|Q_t^{1/2} 1_B|_H / |e^{-.t} 1_B|_H for the node band B = [i0, i1]."""
    w = h_weights(dm)[i0:i1 + 1]
    G = qt_matrix(dm, t)[i0:i1 + 1, i0:i1 + 1]
    num = w @ G @ w
    den = np.sum(w * np.exp(-2.0 * dm.nodes[i0:i1 + 1] * t))
    return float(np.sqrt(num / den))


def band_bound(dm, t, i0, i1):
    """sqrt(W_B (e^{2Mt} - 1)/(2M)) with M the band's top node."""
    w = float(np.sum(h_weights(dm)[i0:i1 + 1]))
    return math.sqrt(w * _growth(float(dm.nodes[i1]), t))


def strong_feller_witness(dm, t, eps, cap=None):
    """Best indicator band for the ratio |Q_t^{1/2} y|_H / |e^{-.t} y|_H."""
    if not (t > 0 and eps > 0):
        raise VolterraLiftError("strong_feller_witness needs t > 0 and eps > 0")
    cap = float(dm.nodes[-1]) if cap is None else float(cap)
    usable = int(np.searchsorted(dm.nodes, cap, side="right"))
    if usable == 0:
        raise VolterraLiftError(f"no node lies below the cap {cap}")
    w = h_weights(dm)[:usable]
    G = qt_matrix(dm, t)[:usable, :usable]
    W = np.outer(w, w) * G
    S = np.zeros((usable + 1, usable + 1))
    S[1:, 1:] = W.cumsum(axis=0).cumsum(axis=1)
    with np.errstate(under="ignore"):
        e2 = np.exp(-2.0 * dm.nodes[:usable] * t)
    d = np.concatenate([[0.0], np.cumsum(w * e2)])

    i0 = np.arange(usable)[:, None]
    i1 = np.arange(usable)[None, :]
    num = S[i1 + 1, i1 + 1] - S[i0, i1 + 1] - S[i1 + 1, i0] + S[i0, i0]
    den = d[i1 + 1] - d[i0]
    valid = (i1 >= i0) & (den > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio_sq = np.where(valid, np.maximum(num, 0.0) / np.where(valid, den, 1.0), np.inf)
    a, b = np.unravel_index(int(np.argmin(ratio_sq)), ratio_sq.shape)
    ratio = float(np.sqrt(ratio_sq[a, b]))

    indicator = np.zeros((dm.size, 1))
    indicator[a:b + 1] = 1.0
    report = WitnessReport(
        y_eps=LiftState(indicator, dm),
        band=(int(a), int(b)),
        ratio=ratio,
        achievable=bool(ratio < eps),
        t=float(t),
        epsilon=float(eps),
        cap=cap,
        band_mass=float(np.sum(w[a:b + 1])),
        band_bound=band_bound(dm, t, a, b),
        mass_bound=_mass_bound(cap, t, eps),
    )
    logger.info("strong Feller witness: band %s, ratio %.4g (eps %.3g, achievable=%s)",
                report.band, ratio, eps, report.achievable)
    return report
