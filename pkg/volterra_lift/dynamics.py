"""Time stepping of the lifted equation and its Volterra counterpart.

The lift Y_t(theta) solves dY = (-theta Y + b(X)) dt + sigma(X) dW with
X = mu[Y]; the direct scheme sums the discretized kernel against the same
increments.  Both run path-batched: states are arrays of shape
(paths, nodes, n) and Brownian increments are (paths, steps, d).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import pandas as pd

from . import rng
from .errors import CoefficientError, ConfigError, KernelError, VolterraLiftError
from .kernels import DiscreteMeasure, Kernel, discretize
from .liftspace import (
    LiftState,
    check_same_measure,
    eps_M_constant,
    forcing,
    h_norm_sq,
    mu_integral,
    v_norm_sq,
)
from .settings import BDG_CONSTANT, BLOW_UP_LIMIT, DEFAULT_BATCH_SIZE

logger = logging.getLogger(__name__)

SCHEMES = ("exact-ou-euler", "full-euler")
GRID_RTOL = 1e-9


# ----- COEFFICIENTS -----

@dataclass(frozen=True)
class Coefficients:
    """Vectorized coefficients: b maps (P, n) -> (P, n), sigma maps (P, n) -> (P, n, d).

    ``sigma_inv`` (P, n) -> (P, d, n) is a right inverse of sigma and is only
    needed by the coupling.
    """

    b: Callable
    sigma: Callable
    n: int = 1
    d: int = 1
    lipschitz: float = 0.0
    sigma_inv: Callable | None = None
    sigma_sup: float | None = None
    sigma_inv_sup: float | None = None
    name: str = "custom"

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise CoefficientError("state and noise dimensions must be >= 1")
        if not self.lipschitz >= 0:
            raise CoefficientError("declared Lipschitz constant must be >= 0")

    def drift(self, x):
        return np.asarray(self.b(x), dtype=float).reshape(x.shape[0], self.n)

    def diffusion(self, x):
        return np.asarray(self.sigma(x), dtype=float).reshape(x.shape[0], self.n, self.d)

    def diffusion_inverse(self, x):
        if self.sigma_inv is None:
            raise CoefficientError(f"coefficients {self.name!r} supply no right inverse of sigma")
        return np.asarray(self.sigma_inv(x), dtype=float).reshape(x.shape[0], self.d, self.n)


def gaussian_coefficients(n=1):
    """b = 0, sigma = identity."""
    eye = np.eye(n)
    return Coefficients(
        b=lambda x: np.zeros_like(x),
        sigma=lambda x: np.broadcast_to(eye, (x.shape[0], n, n)),
        n=n,
        d=n,
        lipschitz=0.0,
        sigma_inv=lambda x: np.broadcast_to(eye, (x.shape[0], n, n)),
        sigma_sup=1.0,
        sigma_inv_sup=1.0,
        name="gaussian",
    )


def zero_coefficients(n=1, d=1):
    return Coefficients(
        b=lambda x: np.zeros_like(x),
        sigma=lambda x: np.zeros((x.shape[0], n, d)),
        n=n,
        d=d,
        lipschitz=0.0,
        name="zero",
    )


# This function builds b(x) = b0 + B x and sigma(x) = S0 + diag(x) S1.
# With S1 = 0 the right inverse is constant and its sup norm is declared.
def affine_coefficients(B, b0=None, S0=None, S1=None):
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n = B.shape[0]
    if B.shape != (n, n):
        raise CoefficientError("drift matrix B must be square")
    b0 = np.zeros(n) if b0 is None else np.asarray(b0, dtype=float).reshape(n)
    S0 = np.eye(n) if S0 is None else np.atleast_2d(np.asarray(S0, dtype=float))
    if S0.shape[0] != n:
        raise CoefficientError("S0 must have one row per state component")
    d = S0.shape[1]
    S1 = np.zeros_like(S0) if S1 is None else np.atleast_2d(np.asarray(S1, dtype=float))
    if S1.shape != S0.shape:
        raise CoefficientError("S1 must have the shape of S0")

    def sigma(x):
        return S0[None, :, :] + x[:, :, None] * S1[None, :, :]

    constant = not np.any(S1)
    sigma_inv_sup = None
    if constant:
        if np.linalg.matrix_rank(S0) < n:
            raise CoefficientError("S0 has no right inverse (rank < n)")
        S0_inv = np.linalg.pinv(S0)
        sigma_inv_sup = float(np.linalg.norm(S0_inv, 2))

        def sigma_inv(x):
            return np.broadcast_to(S0_inv, (x.shape[0], d, n))
    else:
        def sigma_inv(x):
            return np.linalg.pinv(sigma(x))

    return Coefficients(
        b=lambda x: b0[None, :] + x @ B.T,
        sigma=sigma,
        n=n,
        d=d,
        lipschitz=float(max(np.linalg.norm(B, 2), np.linalg.norm(S1, 2))),
        sigma_inv=sigma_inv,
        sigma_sup=float(np.linalg.norm(S0, 2)) if constant else None,
        sigma_inv_sup=sigma_inv_sup,
        name="affine",
    )


def smooth_coefficients(b0, a, s0, s1, n=1):
    """Componentwise b = b0 + a tanh(x), sigma = diag(s0 + s1 tanh(x)); needs s0 > |s1|."""
    b0, a, s0, s1 = (np.broadcast_to(np.asarray(v, dtype=float), (n,)).copy() for v in (b0, a, s0, s1))
    if np.any(s0 <= np.abs(s1)):
        raise CoefficientError("smooth coefficients need s0 > |s1| componentwise")
    eye = np.eye(n)

    def sigma(x):
        return (s0 + s1 * np.tanh(x))[:, :, None] * eye[None, :, :]

    def sigma_inv(x):
        return (1.0 / (s0 + s1 * np.tanh(x)))[:, :, None] * eye[None, :, :]

    return Coefficients(
        b=lambda x: b0 + a * np.tanh(x),
        sigma=sigma,
        n=n,
        d=n,
        lipschitz=float(max(np.max(np.abs(a)), np.max(np.abs(s1)))),
        sigma_inv=sigma_inv,
        sigma_sup=float(np.max(s0 + np.abs(s1))),
        sigma_inv_sup=float(1.0 / np.min(s0 - np.abs(s1))),
        name="smooth",
    )


# ----- CONFIG AND RESULTS -----

@dataclass(frozen=True)
class SimConfig:
    T: float
    dt: float
    n_paths: int = 1
    seed: int = 0
    scheme: str = "exact-ou-euler"

    def __post_init__(self):
        problems = []
        if not (self.T > 0 and math.isfinite(self.T)):
            problems.append(("T", f"must be a finite number > 0, got {self.T}"))
        if not (self.dt > 0 and math.isfinite(self.dt)):
            problems.append(("dt", f"must be a finite number > 0, got {self.dt}"))
        if not problems:
            steps = round(self.T / self.dt)
            if steps < 1 or abs(steps * self.dt - self.T) > GRID_RTOL * self.T:
                problems.append(("dt", f"dt={self.dt} does not divide T={self.T}"))
                problems.append(("T", f"T={self.T} is not a multiple of dt={self.dt}"))
        if int(self.n_paths) < 1:
            problems.append(("n_paths", "must be >= 1"))
        if self.scheme not in SCHEMES:
            problems.append(("scheme", f"must be one of {SCHEMES}"))
        if problems:
            raise ConfigError(problems)

    @property
    def n_steps(self):
        return int(round(self.T / self.dt))

    @property
    def times(self):
        return np.arange(self.n_steps + 1) * self.dt


@dataclass(eq=False)
class SimPath:
    """Monte-Carlo ensemble of lift trajectories.

    x has shape (paths, steps + 1, n) and holds X_k = mu[Y_k]; ``lift`` is
    only filled when the run stored every lift state.
    """

    times: np.ndarray
    x: np.ndarray
    dW: np.ndarray
    dm: DiscreteMeasure
    final: np.ndarray
    flagged: np.ndarray
    h_sq: np.ndarray
    v_sq: np.ndarray
    scheme: str = "exact-ou-euler"
    lift: np.ndarray | None = None
    snapshots: dict = field(default_factory=dict)

    @property
    def n_paths(self):
        return self.x.shape[0]

    @property
    def dt(self):
        return float(self.times[1] - self.times[0])

    def lift_state(self, k, path=0):
        if self.lift is None:
            raise VolterraLiftError("lift states were not stored; rerun with store_lift=True")
        return LiftState(self.lift[path, k], self.dm)

    def to_frame(self, path=0, with_lift=False):
        data = {"t": self.times}
        n = self.x.shape[2]
        for j in range(n):
            data["X" if n == 1 else f"X_{j + 1}"] = self.x[path, :, j]
        if with_lift:
            if self.lift is None:
                raise VolterraLiftError("lift states were not stored")
            for i in range(self.lift.shape[2]):
                for j in range(self.lift.shape[3]):
                    data[f"Y_{i}_{j + 1}"] = self.lift[path, :, i, j]
        return pd.DataFrame(data)


@dataclass(frozen=True)
class DirectPath:
    times: np.ndarray
    x: np.ndarray


# ----- STEPPING -----

def step_factors(dm, dt, scheme="exact-ou-euler"):
    """Per-node (a, phi, g) with y <- a y + phi b + g sigma dW."""
    theta = dm.nodes
    if scheme == "exact-ou-euler":
        a = np.exp(-theta * dt)
        safe = np.where(theta > 0, theta, 1.0)
        phi = np.where(theta > 0, -np.expm1(-theta * dt) / safe, dt)
        return a, phi, a
    if scheme == "full-euler":
        return 1.0 - theta * dt, np.full_like(theta, dt), np.ones_like(theta)
    raise ConfigError([("scheme", f"must be one of {SCHEMES}")])


def advance(values, factors, b_val, noise):
    a, phi, g = factors
    return (a[:, None] * values + phi[:, None] * b_val[..., None, :]
            + g[:, None] * noise[..., None, :])


def step_lift(y, b_val, sigma_val, dW, dt, scheme="exact-ou-euler"):
    if not dt > 0:
        raise VolterraLiftError("step_lift needs dt > 0")
    factors = step_factors(y.dm, dt, scheme)
    b_val = np.asarray(b_val, dtype=float)
    noise = np.asarray(sigma_val, dtype=float) @ np.asarray(dW, dtype=float)
    return LiftState(advance(y.values, factors, b_val, noise), y.dm)


def initial_values(dm, y0, n_paths):
    if isinstance(y0, LiftState):
        check_same_measure(y0, dm)
        values = y0.values
    else:
        values = np.asarray(y0, dtype=float)
    if values.ndim == 2:
        values = np.broadcast_to(values, (n_paths,) + values.shape)
    if values.shape[0] != n_paths or values.shape[1] != dm.size:
        raise VolterraLiftError(f"initial states must have shape ({n_paths}, {dm.size}, n)")
    return values


def _blown_up(values):
    finite = np.all(np.isfinite(values), axis=(-2, -1))
    small = np.all(np.abs(np.where(np.isfinite(values), values, 0.0)) <= BLOW_UP_LIMIT, axis=(-2, -1))
    return ~(finite & small)


def _run_batch(dm, coeffs, y0, dW, cfg, store_lift, snapshot_steps):
    P, K, _ = dW.shape
    factors = step_factors(dm, cfg.dt, cfg.scheme)
    values = np.array(y0, dtype=float)
    x = np.empty((P, K + 1, coeffs.n))
    h_sq = np.empty((P, K + 1))
    v_sq = np.empty((P, K + 1))
    flagged = np.zeros(P, dtype=bool)
    lift = np.empty((P, K + 1) + values.shape[1:]) if store_lift else None
    snaps = {}
    for k in range(K + 1):
        x[:, k] = mu_integral(values, dm)
        h_sq[:, k] = h_norm_sq(values, dm)
        v_sq[:, k] = v_norm_sq(values, dm)
        if store_lift:
            lift[:, k] = values
        if k in snapshot_steps:
            snaps[k] = values.copy()
        if k == K:
            break
        with np.errstate(all="ignore"):
            b_val = coeffs.drift(x[:, k])
            noise = np.einsum("pnd,pd->pn", coeffs.diffusion(x[:, k]), dW[:, k])
            values = advance(values, factors, b_val, noise)
        bad = _blown_up(values) & ~flagged
        if np.any(bad):
            flagged |= bad
            values[flagged] = np.nan
    return x, h_sq, v_sq, flagged, values, lift, snaps


# This function simulates the lifted equation for an ensemble of paths.
# Coefficients are frozen at the left grid point; X_k = mu[Y_k] at every step.
def simulate_lift(dm, coeffs, y0, cfg, dW=None, threads=1, batch_size=DEFAULT_BATCH_SIZE,
                  store_lift=False, snapshot_times=()):
    K = cfg.n_steps
    if dW is None:
        dW = rng.brownian_increments(cfg.seed, np.arange(cfg.n_paths), K, coeffs.d, cfg.dt)
    dW = np.asarray(dW, dtype=float)
    if dW.shape != (cfg.n_paths, K, coeffs.d):
        raise VolterraLiftError(f"increments must have shape {(cfg.n_paths, K, coeffs.d)}, got {dW.shape}")
    values0 = initial_values(dm, y0, cfg.n_paths)
    if values0.shape[-1] != coeffs.n:
        raise CoefficientError(f"coefficients act on R^{coeffs.n}, state has {values0.shape[-1]} components")
    snapshot_steps = {int(round(t / cfg.dt)): t for t in snapshot_times}

    def batch(start, stop):
        return _run_batch(dm, coeffs, values0[start:stop], dW[start:stop], cfg, store_lift, snapshot_steps)

    parts = rng.run_batched(batch, cfg.n_paths, threads=threads, batch_size=batch_size)
    x, h_sq, v_sq, flagged, final, lift = (
        np.concatenate([p[i] for p in parts]) if parts[0][i] is not None else None for i in range(6)
    )
    snapshots = {t: np.concatenate([p[6][k] for p in parts]) for k, t in snapshot_steps.items()}
    if np.any(flagged):
        logger.warning("%d of %d paths blew up (|Y| > %.0e) and were flagged", int(flagged.sum()),
                       flagged.size, BLOW_UP_LIMIT)
    return SimPath(times=cfg.times, x=x, dW=dW, dm=dm, final=final, flagged=flagged, h_sq=h_sq,
                   v_sq=v_sq, scheme=cfg.scheme, lift=lift, snapshots=snapshots)


# ----- DIRECT VOLTERRA SCHEME -----

def _measure_of(k_or_dm):
    if isinstance(k_or_dm, DiscreteMeasure):
        return k_or_dm
    if isinstance(k_or_dm, Kernel):
        if k_or_dm.has_density:
            raise KernelError(f"{k_or_dm.variant} kernel must be discretized before direct simulation")
        return discretize(k_or_dm, 1)
    raise KernelError("expected a Kernel or DiscreteMeasure")


def lag_weights(dm, n_steps, dt, scheme="exact-ou-euler", matched_drift=False):
    """Drift and diffusion weights indexed by lag m = k - 1 - j."""
    a, phi, g = step_factors(dm, dt, scheme)
    lags = np.arange(n_steps)
    if scheme == "exact-ou-euler":
        powers = np.exp(-np.multiply.outer(lags * dt, dm.nodes))
        diffusion = (powers * g) @ dm.weights
        drift = (powers * phi) @ dm.weights if matched_drift else diffusion * dt
    else:
        diffusion = (a[None, :] ** lags[:, None]) @ dm.weights
        drift = diffusion * dt
    return drift, diffusion


def _forcing_path(dm, y0_values, times, scheme, dt):
    if scheme == "exact-ou-euler":
        return np.stack([forcing(y0_values, t, dm) for t in times], axis=1)
    a = 1.0 - dm.nodes * dt
    return np.stack([np.einsum("...in,i->...n", y0_values, dm.weights * a ** k)
                     for k in range(times.size)], axis=1)


# This function sums the discretized kernel against b dt + sigma dW directly.
# It shares the lift's scheme so both sides use the same endpoint rule.
def simulate_svie_direct(k_or_dm, y0, coeffs, cfg, dW, matched_drift=False):
    dm = _measure_of(k_or_dm)
    dW = np.asarray(dW.dW if isinstance(dW, SimPath) else dW, dtype=float)
    K = cfg.n_steps
    P = dW.shape[0]
    if dW.shape[1:] != (K, coeffs.d):
        raise VolterraLiftError("increments do not match the simulation grid")
    values0 = initial_values(dm, y0, P)
    drift_w, diff_w = lag_weights(dm, K, cfg.dt, cfg.scheme, matched_drift)
    x = np.empty((P, K + 1, coeffs.n))
    x[:] = _forcing_path(dm, values0, cfg.times, cfg.scheme, cfg.dt)
    b_hist = np.zeros((P, K, coeffs.n))
    noise_hist = np.zeros((P, K, coeffs.n))
    for k in range(1, K + 1):
        j = k - 1
        b_hist[:, j] = coeffs.drift(x[:, j])
        noise_hist[:, j] = np.einsum("pnd,pd->pn", coeffs.diffusion(x[:, j]), dW[:, j])
        lags = k - 1 - np.arange(k)
        x[:, k] += np.einsum("j,pjn->pn", drift_w[lags], b_hist[:, :k])
        x[:, k] += np.einsum("j,pjn->pn", diff_w[lags], noise_hist[:, :k])
    return DirectPath(times=cfg.times, x=x)


def equivalence_gap(lift_path, direct):
    if lift_path.times.shape != direct.times.shape or not np.allclose(lift_path.times, direct.times, rtol=0,
                                                                       atol=1e-12):
        raise VolterraLiftError("lift and direct paths live on different time grids")
    if lift_path.x.shape != direct.x.shape:
        raise VolterraLiftError("lift and direct paths have different shapes")
    diff = lift_path.x - direct.x
    dt = lift_path.dt
    sup_gap = float(np.max(np.abs(diff)))
    l2_gap = float(np.sqrt(np.mean(np.sum(diff[:, :-1] ** 2, axis=(1, 2)) * dt)))
    return {"sup_gap": sup_gap, "l2_gap": l2_gap}


def _as_batched(sigma_path, dW):
    sigma_path = np.asarray(sigma_path, dtype=float)
    dW = np.asarray(dW, dtype=float)
    if dW.ndim == 2:
        dW = dW[None]
    if sigma_path.ndim == 3:
        sigma_path = np.broadcast_to(sigma_path, (dW.shape[0],) + sigma_path.shape)
    return sigma_path, dW


def stochastic_convolution(dm, sigma_path, dW, dt):
    """I_{k+1} = e^{-theta dt}(I_k + sigma_k dW_k); returns (P, K+1, nodes, n)."""
    sigma_path, dW = _as_batched(sigma_path, dW)
    P, K, _ = dW.shape
    a = np.exp(-dm.nodes * dt)
    noise = np.einsum("pknd,pkd->pkn", sigma_path, dW)
    out = np.zeros((P, K + 1, dm.size, noise.shape[-1]))
    for k in range(K):
        out[:, k + 1] = a[:, None] * (out[:, k] + noise[:, k, None, :])
    return out


def volterra_sum(dm, sigma_path, dW, dt):
    """X_k = sum_{j<k} K(t_k - t_j) sigma_j dW_j with the discretized kernel."""
    sigma_path, dW = _as_batched(sigma_path, dW)
    P, K, _ = dW.shape
    noise = np.einsum("pknd,pkd->pkn", sigma_path, dW)
    kern = dm.kernel(np.arange(1, K + 1) * dt)
    x = np.zeros((P, K + 1, noise.shape[-1]))
    for k in range(1, K + 1):
        x[:, k] = np.einsum("j,pjn->pn", kern[k - 1 - np.arange(k)], noise[:, :k])
    return x


# ----- PICARD ITERATION -----

@dataclass(frozen=True)
class PicardReport:
    iterate_gaps: list
    contraction_ratios: list
    lambda_: float
    kappa: float
    M: float
    converged: bool
    residual: float


def picard_constants(dm, L):
    """(lambda, kappa, M) of the weighted norm used to measure Picard iterates."""
    if L == 0:
        return 3.0, 0.0, 0.0
    c2 = BDG_CONSTANT ** 2
    eps = 1.0 / (2.0 * L ** 2 * (5.0 + 8.0 * c2) * dm.mass_r)
    _, M = eps_M_constant(dm, eps)
    kappa = 2.0 * L ** 2 * (M + 1.0) * (5.0 + 8.0 * c2) * dm.mass_r
    return 3.0 + 2.0 * kappa, kappa, M


def weighted_path_norm(dm, diff, times, lambda_, kappa):
    """sup_t e^{-lambda t}|D|_H^2 + sum dt e^{-lambda t}(kappa |D|_H^2 + |D|_V^2), square-rooted."""
    dt = float(times[1] - times[0])
    decay = np.exp(-lambda_ * times)
    h2 = h_norm_sq(diff, dm)
    v2 = v_norm_sq(diff, dm)
    sup_term = np.max(decay * h2)
    integral = np.sum((decay * (kappa * h2 + v2))[:-1]) * dt
    return float(np.sqrt(sup_term + integral))


def _sup_h(dm, diff):
    return float(np.sqrt(np.max(h_norm_sq(diff, dm))))


def picard_map(dm, coeffs, y0_values, lift_prev, dW, dt, scheme="exact-ou-euler"):
    """Mild-formula step map with coefficients read off the previous iterate."""
    factors = step_factors(dm, dt, scheme)
    K = dW.shape[0]
    x_prev = mu_integral(lift_prev, dm)
    b_all = coeffs.drift(x_prev[:K])
    noise_all = np.einsum("knd,kd->kn", coeffs.diffusion(x_prev[:K]), dW)
    out = np.empty_like(lift_prev)
    out[0] = y0_values
    for k in range(K):
        out[k + 1] = advance(out[k], factors, b_all[k], noise_all[k])
    return out


# This function runs Picard iterations on one Brownian path.
# Iterates start from Y = 0. Reported gaps use the exponentially weighted path norm;
# convergence and the residual use the unweighted sup_k |.|_H.
def picard_solve(dm, coeffs, y0, cfg, n_iter=20, dW=None, path_index=0, tol=1e-10):
    if n_iter < 2:
        raise VolterraLiftError("picard_solve needs n_iter >= 2")
    K = cfg.n_steps
    if dW is None:
        dW = rng.brownian_increments(cfg.seed, [path_index], K, coeffs.d, cfg.dt)[0]
    dW = np.asarray(dW, dtype=float)
    y0_values = initial_values(dm, y0, 1)[0]
    lambda_, kappa, M = picard_constants(dm, coeffs.lipschitz)
    times = cfg.times
    current = np.zeros((K + 1,) + y0_values.shape)
    gaps = []
    converged = False
    for _ in range(n_iter):
        nxt = picard_map(dm, coeffs, y0_values, current, dW, cfg.dt, cfg.scheme)
        gaps.append(weighted_path_norm(dm, nxt - current, times, lambda_, kappa))
        step = _sup_h(dm, nxt - current)
        current = nxt
        if step <= tol * max(1.0, _sup_h(dm, current)):
            converged = True
            break
    ratios = [g1 / g0 for g0, g1 in zip(gaps[:-1], gaps[1:]) if g0 > 0]
    residual = _sup_h(dm, picard_map(dm, coeffs, y0_values, current, dW, cfg.dt, cfg.scheme) - current)
    if not converged:
        logger.warning("Picard iteration did not converge in %d iterations (last gap %.3e)", n_iter, gaps[-1])
    x = mu_integral(current, dm)
    path = SimPath(times=times, x=x[None], dW=dW[None], dm=dm, final=current[-1][None],
                   flagged=np.zeros(1, dtype=bool), h_sq=h_norm_sq(current, dm)[None],
                   v_sq=v_norm_sq(current, dm)[None], scheme=cfg.scheme, lift=current[None])
    report = PicardReport(iterate_gaps=gaps, contraction_ratios=ratios, lambda_=lambda_, kappa=kappa, M=M,
                          converged=converged, residual=residual)
    return path, report


def picard_residual(dm, coeffs, path, p=0):
    """sup_k |Phi(Y)_k - Y_k|_H for a stored lift trajectory."""
    if path.lift is None:
        raise VolterraLiftError("picard_residual needs a path simulated with store_lift=True")
    lift = path.lift[p]
    mapped = picard_map(dm, coeffs, lift[0], lift, path.dW[p], path.dt, path.scheme)
    return _sup_h(dm, mapped - lift)


# ----- ENSEMBLE DIAGNOSTICS -----

def _kept(path):
    keep = ~path.flagged
    if not np.any(keep):
        raise VolterraLiftError("every path in the ensemble was flagged")
    return keep


def ensemble_stats(path):
    """Per-time mean, variance and standard errors of X over unflagged paths."""
    x = path.x[_kept(path)]
    P = x.shape[0]
    mean = x.mean(axis=0)
    var = x.var(axis=0, ddof=1) if P > 1 else np.zeros_like(mean)
    centred = x - mean
    m4 = np.mean(centred ** 4, axis=0)
    var_stderr = np.sqrt(np.maximum(m4 - var ** 2, 0.0) / P)
    return {"t": path.times, "mean": mean, "var": var, "stderr": np.sqrt(var / P), "var_stderr": var_stderr,
            "n_paths": P}


def stats_frame(stats):
    cols = {"t": stats["t"]}
    for j in range(stats["mean"].shape[1]):
        suffix = f"_{j + 1}" if stats["mean"].shape[1] > 1 else ""
        cols[f"mean{suffix}"] = stats["mean"][:, j]
        cols[f"var{suffix}"] = stats["var"][:, j]
        cols[f"stderr{suffix}"] = stats["stderr"][:, j]
    return pd.DataFrame(cols)


def apriori_bound_check(path):
    """MC estimate of E[sup_t |Y_t|_H^2 + int |Y_t|_V^2 dt] with its standard error."""
    keep = _kept(path)
    sup_h = np.max(path.h_sq[keep], axis=1)
    int_v = np.sum(path.v_sq[keep][:, :-1], axis=1) * path.dt
    lhs = sup_h + int_v
    P = lhs.size
    stderr = float(lhs.std(ddof=1) / np.sqrt(P)) if P > 1 else 0.0
    return {"estimate": float(lhs.mean()), "stderr": stderr, "n_paths": P, "finite": bool(np.all(np.isfinite(lhs)))}


def apriori_refinement(dm, coeffs, y0, T, dts, n_paths, seed=0, scheme="exact-ou-euler", threads=1):
    """apriori_bound_check over successive dt; bounded when neighbouring ratios stay within [1/2, 2]."""
    rows = []
    for dt in dts:
        cfg = SimConfig(T=T, dt=dt, n_paths=n_paths, seed=seed, scheme=scheme)
        report = apriori_bound_check(simulate_lift(dm, coeffs, y0, cfg, threads=threads))
        rows.append({"dt": dt, "estimate": report["estimate"], "stderr": report["stderr"]})
    table = pd.DataFrame(rows)
    table["ratio"] = table["estimate"] / table["estimate"].shift(1)
    ratios = table["ratio"].dropna()
    bounded = bool(np.all(np.isfinite(table["estimate"])) and np.all((ratios <= 2.0) & (ratios >= 0.5)))
    return table, bounded
