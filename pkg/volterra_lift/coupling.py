"""Asymptotic coupling of the lifted equation and the log-Harnack check.

Y follows the plain lifted equation from y.  Ybar starts at ybar and gets the
extra drift sigma(mu[Ybar]) v with the control

    v = lambda sigma^{-1}(mu[Y]) int r(m v theta) (Y - Ybar) dmu,

both driven by the same increments.  The Girsanov weight R = exp(-int v dW
- 1/2 int |v|^2 dt) turns Ybar into a solution started at ybar, so weighted
averages over the coupled ensemble are expectations of that solution.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import pandas as pd

from . import rng
from .dynamics import SimConfig, advance, initial_values, simulate_lift, step_factors
from .errors import CoefficientError, VolterraLiftError
from .liftspace import check_same_measure, h_norm_sq, h_weights, mu_integral
from .settings import DEFAULT_BATCH_SIZE, MC_SIGMAS, MIN_EFFECTIVE_SAMPLES, TRUNCATION_FACTOR

logger = logging.getLogger(__name__)


# ----- CONSTANTS -----

@dataclass(frozen=True)
class CouplingConfig:
    L: float
    sigma_inv_sup: float
    sigma_sup: float | None
    m: float
    lambda_: float
    beta: float
    xi: float
    mass_r: float
    r_m: float

    @property
    def entropy_constant(self):
        """1/2 |sigma^{-1}|^2 lambda; the entropy bound is this times |y - ybar|_H^2."""
        return 0.5 * self.sigma_inv_sup ** 2 * self.lambda_

    def decay_bound(self, t, distance):
        return self.r_m ** -0.5 * math.exp(-0.5 * self.beta * t) * distance

    def to_dict(self):
        return {
            "L": self.L,
            "sigma_inv_sup": self.sigma_inv_sup,
            "sigma_sup": self.sigma_sup,
            "m": self.m,
            "lambda": self.lambda_,
            "beta": self.beta,
            "xi": self.xi,
            "mass_r": self.mass_r,
            "r_m": self.r_m,
        }


def _tail(dm, m):
    sel = dm.nodes >= m
    return float(np.sum(dm.weights[sel] * dm.r_values[sel]))


def m_candidates(dm):
    """{1} and the float just above each node >= 1; the closed tail changes only there."""
    above = dm.nodes[dm.nodes >= 1.0]
    return np.unique(np.concatenate([[1.0], np.nextafter(above, np.inf)]))


# This function returns the smallest admissible m on the candidate grid.
# Admissible: 2 L^2 (1 + mass_r) * sum_{theta >= m} c r <= 1.
def compute_m(dm, L):
    if L < 0:
        raise VolterraLiftError("Lipschitz constant must be >= 0")
    if L == 0:
        return 1.0
    scale = 2.0 * L ** 2 * (1.0 + dm.mass_r)
    for m in m_candidates(dm):
        if scale * _tail(dm, m) <= 1.0:
            return float(m)
    raise VolterraLiftError("no admissible m found")


def compute_lambda(dm, L, m):
    if m < 1:
        raise VolterraLiftError("m must be >= 1")
    r_m = float(dm.r(m))
    return 1.0 + 2.0 * L ** 2 * (1.0 + dm.mass_r) * r_m ** -2


def compute_xi(dm, L, m, lambda_):
    r_m = float(dm.r(m))
    return 2.0 * lambda_ - 1.0 - 2.0 * L ** 2 * (1.0 + dm.mass_r) * r_m ** -2


def coupling_config(dm, coeffs, m=None):
    if coeffs.sigma_inv is None or coeffs.sigma_inv_sup is None:
        raise CoefficientError(f"coefficients {coeffs.name!r} need a bounded right inverse of sigma")
    L = float(coeffs.lipschitz)
    if m is None:
        m = compute_m(dm, L)
    else:
        m = float(m)
        if m < 1 or 2.0 * L ** 2 * (1.0 + dm.mass_r) * _tail(dm, m) > 1.0:
            raise VolterraLiftError(f"m={m} violates the tail condition for L={L}")
    lambda_ = compute_lambda(dm, L, m)
    return CouplingConfig(
        L=L,
        sigma_inv_sup=float(coeffs.sigma_inv_sup),
        sigma_sup=coeffs.sigma_sup,
        m=m,
        lambda_=lambda_,
        beta=dm.beta,
        xi=compute_xi(dm, L, m, lambda_),
        mass_r=dm.mass_r,
        r_m=float(dm.r(m)),
    )


# ----- CONTROL -----

def control_weights(dm, m):
    """c_i r(m v theta_i)."""
    return dm.weights * dm.r(np.maximum(m, dm.nodes))


def _control(dm, cfg, coeffs, y, ybar, x):
    diff = np.einsum("pin,i->pn", y - ybar, control_weights(dm, cfg.m))
    return cfg.lambda_ * np.einsum("pdn,pn->pd", coeffs.diffusion_inverse(x), diff)


def control_drift(y, ybar, cfg, coeffs):
    check_same_measure(y, ybar)
    dm = y.dm
    single = y.values.ndim == 2
    yv = y.values[None] if single else y.values
    ybv = ybar.values[None] if single else ybar.values
    v = _control(dm, cfg, coeffs, yv, ybv, mu_integral(yv, dm))
    return v[0] if single else v


# ----- COUPLED SIMULATION -----

@dataclass(eq=False)
class CouplingRun:
    """Coupled ensemble: distances, Girsanov log-weights and snapshots per path."""

    times: np.ndarray
    dist_sq: np.ndarray
    logR: np.ndarray
    flagged: np.ndarray
    cfg: CouplingConfig
    initial_distance: float
    y_final: np.ndarray
    ybar_final: np.ndarray
    snapshots: dict = field(default_factory=dict)

    @property
    def kept(self):
        keep = ~self.flagged
        if not np.any(keep):
            raise VolterraLiftError("every coupled path was truncated")
        return keep


def _coupled_batch(dm, coeffs, cfg, y0, yb0, dW, sim, cap, snapshot_steps):
    P, K, _ = dW.shape
    factors = step_factors(dm, sim.dt, sim.scheme)
    y = np.array(y0, dtype=float)
    yb = np.array(yb0, dtype=float)
    dist_sq = np.empty((P, K + 1))
    logR = np.zeros((P, K + 1))
    stoch_int = np.zeros(P)
    det_int = np.zeros(P)
    flagged = np.zeros(P, dtype=bool)
    snaps = {}
    for k in range(K + 1):
        dist_sq[:, k] = h_norm_sq(y - yb, dm)
        logR[:, k] = -stoch_int - 0.5 * det_int
        if k in snapshot_steps:
            snaps[k] = (y.copy(), yb.copy())
        if k == K:
            break
        with np.errstate(all="ignore"):
            x = mu_integral(y, dm)
            xb = mu_integral(yb, dm)
            v = _control(dm, cfg, coeffs, y, yb, x)
            sig_b = coeffs.diffusion(xb)
            drift_b = coeffs.drift(xb) + np.einsum("pnd,pd->pn", sig_b, v)
            y = advance(y, factors, coeffs.drift(x), np.einsum("pnd,pd->pn", coeffs.diffusion(x), dW[:, k]))
            yb = advance(yb, factors, drift_b, np.einsum("pnd,pd->pn", sig_b, dW[:, k]))
            stoch_int += np.einsum("pd,pd->p", v, dW[:, k])
            det_int += np.sum(v ** 2, axis=1) * sim.dt
        out = ~(np.sqrt(h_norm_sq(y, dm)) <= cap) | ~(np.sqrt(h_norm_sq(yb, dm)) <= cap)
        flagged |= out
    return dist_sq, logR, flagged, y, yb, snaps


def simulate_coupled(dm, coeffs, y, ybar, cfg, sim, threads=1, batch_size=DEFAULT_BATCH_SIZE, snapshot_times=()):
    check_same_measure(y, dm)
    check_same_measure(ybar, dm)
    if coeffs.sigma_inv is None:
        raise CoefficientError(f"coefficients {coeffs.name!r} supply no right inverse of sigma")
    K = sim.n_steps
    dW = rng.brownian_increments(sim.seed, np.arange(sim.n_paths), K, coeffs.d, sim.dt)
    y0 = initial_values(dm, y, sim.n_paths)
    yb0 = initial_values(dm, ybar, sim.n_paths)
    scale = max(np.sqrt(h_norm_sq(y)), np.sqrt(h_norm_sq(ybar)), 1.0)
    cap = TRUNCATION_FACTOR * float(scale)
    snapshot_steps = {int(round(t / sim.dt)): t for t in snapshot_times}

    def batch(start, stop):
        return _coupled_batch(dm, coeffs, cfg, y0[start:stop], yb0[start:stop], dW[start:stop], sim, cap,
                              snapshot_steps)

    parts = rng.run_batched(batch, sim.n_paths, threads=threads, batch_size=batch_size)
    dist_sq, logR, flagged, y_final, yb_final = (np.concatenate([p[i] for p in parts]) for i in range(5))
    snapshots = {
        t: (np.concatenate([p[5][k][0] for p in parts]), np.concatenate([p[5][k][1] for p in parts]))
        for k, t in snapshot_steps.items()
    }
    if np.any(flagged):
        logger.warning("%d of %d coupled paths left the truncation ball (cap %.3g) and are excluded",
                       int(flagged.sum()), flagged.size, cap)
    return CouplingRun(times=sim.times, dist_sq=dist_sq, logR=logR, flagged=flagged, cfg=cfg,
                       initial_distance=float(np.sqrt(h_norm_sq(y - ybar))), y_final=y_final,
                       ybar_final=yb_final, snapshots=snapshots)


# ----- ESTIMATES -----

def effective_sample_size(weights, axis=0):
    return np.sum(weights, axis=axis) ** 2 / np.sum(weights ** 2, axis=axis)


def _weighted_curve(run, values):
    keep = run.kept
    R = np.exp(run.logR[keep])
    vals = R * values[keep]
    P = vals.shape[0]
    ess = effective_sample_size(R)
    degenerate = bool(np.min(ess) < MIN_EFFECTIVE_SAMPLES)
    if degenerate:
        logger.warning("importance weights degenerate: effective sample size %.1f < %d",
                       float(np.min(ess)), MIN_EFFECTIVE_SAMPLES)
    return vals.mean(axis=0), vals.std(axis=0, ddof=1) / np.sqrt(P), ess, degenerate


def martingale_check(run):
    """E[R_t] with standard errors; should equal 1 at every t."""
    keep = run.kept
    R = np.exp(run.logR[keep])
    mean = R.mean(axis=0)
    stderr = R.std(axis=0, ddof=1) / np.sqrt(R.shape[0])
    ok = bool(np.all(np.abs(mean - 1.0) <= MC_SIGMAS * stderr + 1e-12))
    return pd.DataFrame({"t": run.times, "mean_R": mean, "stderr": stderr}), ok


# This function estimates E[R_t log R_t] against its bound at every grid time.
def entropy_estimate(run):
    estimate, stderr, ess, degenerate = _weighted_curve(run, run.logR)
    bound = run.cfg.entropy_constant * run.initial_distance ** 2
    curve = pd.DataFrame({"t": run.times, "estimate": estimate, "stderr": stderr, "bound": bound, "ess": ess})
    curve["pass"] = curve["estimate"] <= curve["bound"] + MC_SIGMAS * curve["stderr"] + 1e-12
    return {"curve": curve, "bound": bound, "pass": bool(curve["pass"].all()), "degenerate": degenerate}


def decay_estimate(run, cfg=None):
    """R-weighted mean of |Y_t - Ybar_t|_H against r(m)^{-1/2} e^{-beta t/2}|y - ybar|_H."""
    cfg = run.cfg if cfg is None else cfg
    estimate, stderr, ess, degenerate = _weighted_curve(run, np.sqrt(run.dist_sq))
    bound = np.array([cfg.decay_bound(t, run.initial_distance) for t in run.times])
    curve = pd.DataFrame({"t": run.times, "estimate": estimate, "stderr": stderr, "bound": bound, "ess": ess})
    curve["pass"] = curve["estimate"] <= curve["bound"] + MC_SIGMAS * curve["stderr"] + 1e-12
    asserted = cfg.beta > 0
    if not asserted:
        logger.warning("beta = 0: the decay claim is not asserted for this kernel")
    return {
        "curve": curve,
        "asserted": asserted,
        "pass": bool(curve["pass"].all()) if asserted else True,
        "degenerate": degenerate,
    }


def fit_log_slope(times, values, t_range):
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    sel = (times >= t_range[0]) & (times <= t_range[1]) & (values > 0)
    if np.count_nonzero(sel) < 2:
        raise VolterraLiftError("fit_log_slope needs at least two positive values in range")
    slope, _ = np.polyfit(times[sel], np.log(values[sel]), 1)
    return float(slope)


# ----- HARNACK FUNCTIONS -----

@dataclass(frozen=True)
class HarnackFunction:
    """f >= 1 on lift states with the Lipschitz constant of log f in the H-norm."""

    f_id: str
    fn: Callable
    lip_log: float | None

    def __call__(self, values):
        return np.asarray(self.fn(values), dtype=float)


def constant_one():
    return HarnackFunction("constant_one", lambda values: np.ones(values.shape[0]), 0.0)


def capped_distance(z, cap=1.0):
    """f = 1 + min(|y - z|_H, cap)."""
    if cap <= 0:
        raise VolterraLiftError("cap must be > 0")

    def fn(values):
        return 1.0 + np.minimum(np.sqrt(h_norm_sq(values - z.values, z.dm)), cap)

    return HarnackFunction(f"capped_distance(cap={cap:g})", fn, 1.0)


def exp_linear(a, clip=50.0):
    """f = 1 + exp(<a, y>_H clipped to [-clip, clip])."""

    w = h_weights(a.dm)

    def fn(values):
        u = np.einsum("pin,in,i->p", values, a.values, w)
        return 1.0 + np.exp(np.clip(u, -clip, clip))

    return HarnackFunction("exp_linear", fn, float(np.sqrt(h_norm_sq(a))))


def _mean_log(values):
    logs = np.log(values)
    return float(logs.mean()), float(logs.std(ddof=1) / np.sqrt(logs.size))


def _log_mean(values):
    mean = float(values.mean())
    # delta method
    return math.log(mean), float(values.std(ddof=1) / (np.sqrt(values.size) * mean))


# This function compares P_t log f(ybar) with the right-hand side of the
# asymptotic log-Harnack inequality built from an ensemble started at y.
def harnack_check(f_family, y, ybar, times, dm, coeffs, cfg, sim, threads=1):
    for f in f_family:
        if f.lip_log is None:
            raise VolterraLiftError(f"Harnack function {f.f_id!r} has no known Lipschitz constant for log f")
    times = list(times)
    horizon_sim = SimConfig(T=max(times), dt=sim.dt, n_paths=sim.n_paths, seed=sim.seed, scheme=sim.scheme)
    from_y = simulate_lift(dm, coeffs, y, horizon_sim, threads=threads, snapshot_times=times)
    same = bool(np.array_equal(y.values, ybar.values))
    if same:
        from_ybar = from_y
    else:
        other = SimConfig(T=horizon_sim.T, dt=sim.dt, n_paths=sim.n_paths, seed=sim.seed + 1, scheme=sim.scheme)
        from_ybar = simulate_lift(dm, coeffs, ybar, other, threads=threads, snapshot_times=times)
    distance = float(np.sqrt(h_norm_sq(y - ybar)))
    rows = []
    for t in times:
        snap_y = from_y.snapshots[t][~from_y.flagged]
        snap_yb = from_ybar.snapshots[t][~from_ybar.flagged]
        for f in f_family:
            lhs, lhs_se = _mean_log(f(snap_yb))
            log_mean, rhs_se = _log_mean(f(snap_y))
            rhs = log_mean + cfg.entropy_constant * distance ** 2 + cfg.decay_bound(t, distance) * f.lip_log
            se = math.hypot(lhs_se, rhs_se)
            margin = (rhs - lhs) / se if se > 0 else math.inf
            rows.append({
                "t": float(t),
                "f_id": f.f_id,
                "lhs": lhs,
                "lhs_se": lhs_se,
                "rhs": rhs,
                "rhs_se": rhs_se,
                "margin_sigmas": margin,
                "pass": bool(lhs <= rhs + MC_SIGMAS * se + 1e-12),
            })
    return pd.DataFrame(rows)
