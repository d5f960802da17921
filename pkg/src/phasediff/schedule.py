"""Diffusion schedule: noise levels and posterior coefficients.

The forward chain interpolates a label embedding toward a conditioning
vector z:

    q(y_t | y_{t-1}, z) = N( sqrt(1-b_t) y_{t-1} + (1 - sqrt(1-b_t)) z,  b_t I )
    q(y_t | y_0, z)     = N( sqrt(a_t) y_0 + (1 - sqrt(a_t)) z,  (1 - a_t) I )

with per-step alpha 1-b_t and cumulative alpha a_t = prod(1-b_s).  The
posterior q(y_{t-1} | y_t, y_0, z) is Gaussian by conjugacy, with mean
g0*y_0 + g1*y_t + g2*z and variance g3*b_t where

    g0 = b_t sqrt(a_{t-1}) / (1 - a_t)
    g1 = (1 - a_{t-1}) sqrt(1-b_t) / (1 - a_t)
    g2 = 1 + (sqrt(a_t) - 1)(sqrt(1-b_t) + sqrt(a_{t-1})) / (1 - a_t)
    g3 = (1 - a_{t-1}) / (1 - a_t)

g0+g1+g2 = 1 identically (the coefficients come from completing the square
of a product of two Gaussians in y_{t-1}), which `build_linear_schedule`
asserts to 1e-12, and `conjugacy_oracle` rederives the posterior directly
from precision addition as an independent check.

All arrays are indexed by timestep t (slot 0 is the t=0 boundary), are
precomputed once, and the schedule is immutable afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ScheduleError

__all__ = [
    "DiffusionSchedule",
    "build_linear_schedule",
    "posterior_coefficients",
    "pair_coefficients",
    "conjugacy_oracle",
    "timestep_subsequence",
]

_GAMMA_SUM_TOL = 1e-12


@dataclass(frozen=True)
class DiffusionSchedule:
    """Precomputed per-timestep quantities; index = timestep, slot 0 = boundary."""

    T: int
    beta: np.ndarray            # beta[1..T], beta[0] = nan
    perstep_alpha: np.ndarray   # 1 - beta[t]
    cum_alpha: np.ndarray       # prod of perstep_alpha, cum_alpha[0] = 1
    one_minus_cum: np.ndarray   # 1 - cum_alpha
    gamma0: np.ndarray          # gamma*[1..T]; t=1 entries are the (1,0,0,0) boundary
    gamma1: np.ndarray
    gamma2: np.ndarray
    gamma3: np.ndarray

    def marginal(self, t: int) -> tuple[float, float, float]:
        """(coeff on y_0, coeff on z, noise std) of q(y_t | y_0, z)."""
        self._check_t(t, low=1)
        root = float(np.sqrt(self.cum_alpha[t]))
        return root, 1.0 - root, float(np.sqrt(self.one_minus_cum[t]))

    def _check_t(self, t: int, low: int) -> None:
        if not (low <= int(t) <= self.T):
            raise ScheduleError(f"timestep {t} outside [{low}, {self.T}]")


def build_linear_schedule(T: int, beta_start: float, beta_end: float) -> DiffusionSchedule:
    """Linearly interpolated beta from beta_start to beta_end inclusive."""
    T = int(T)
    if T < 2:
        raise ScheduleError(f"need at least 2 timesteps, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(f"betas must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})")

    beta = np.full(T + 1, np.nan)
    beta[1:] = np.linspace(beta_start, beta_end, T)
    perstep = np.full(T + 1, np.nan)
    perstep[1:] = 1.0 - beta[1:]
    cum = np.ones(T + 1)
    cum[1:] = np.cumprod(perstep[1:])
    one_minus = 1.0 - cum

    gammas = np.full((4, T + 1), np.nan)
    for t in range(1, T + 1):
        gammas[:, t] = _gammas_from_alphas(perstep[t], cum[t - 1], cum[t])
    sched = DiffusionSchedule(T, beta, perstep, cum, one_minus, *gammas)
    _validate(sched)
    return sched


def _gammas_from_alphas(perstep_hi: float, cum_lo: float, cum_hi: float):
    """Posterior coefficients for one transition (also used for skip pairs)."""
    beta_eff = 1.0 - perstep_hi
    denom = 1.0 - cum_hi
    root_step = np.sqrt(perstep_hi)
    root_lo = np.sqrt(cum_lo)
    root_hi = np.sqrt(cum_hi)
    g0 = beta_eff * root_lo / denom
    g1 = (1.0 - cum_lo) * root_step / denom
    g2 = 1.0 + (root_hi - 1.0) * (root_step + root_lo) / denom
    g3 = (1.0 - cum_lo) / denom
    return g0, g1, g2, g3


def _validate(s: DiffusionSchedule) -> None:
    t = np.arange(1, s.T + 1)
    if not np.all((s.beta[t] > 0.0) & (s.beta[t] < 1.0)):
        raise ScheduleError("beta out of (0,1)")
    if s.T > 1 and not np.all(np.diff(s.beta[1:]) >= 0.0):
        raise ScheduleError("linear schedule must be non-decreasing")
    if not np.all(np.diff(s.cum_alpha) < 0.0):
        raise ScheduleError("cumulative alpha must be strictly decreasing")
    if not np.allclose(s.cum_alpha[t], s.perstep_alpha[t] * s.cum_alpha[t - 1], rtol=0, atol=1e-15):
        raise ScheduleError("cumulative alpha recursion violated")
    gsum = s.gamma0[t] + s.gamma1[t] + s.gamma2[t]
    worst = float(np.max(np.abs(gsum - 1.0)))
    if worst > _GAMMA_SUM_TOL:
        raise ScheduleError(f"gamma0+gamma1+gamma2 deviates from 1 by {worst:.3e}")
    inner = np.arange(2, s.T + 1)
    if not np.all((s.gamma3[inner] > 0.0) & (s.gamma3[inner] < 1.0)):
        raise ScheduleError("gamma3 outside (0,1)")


def posterior_coefficients(s: DiffusionSchedule, t: int) -> tuple[float, float, float, float]:
    """(g0, g1, g2, g3) at timestep t >= 2; t=1 is the sampler's terminal branch."""
    s._check_t(t, low=2)
    return (float(s.gamma0[t]), float(s.gamma1[t]), float(s.gamma2[t]), float(s.gamma3[t]))


def pair_coefficients(s: DiffusionSchedule, t_hi: int, t_lo: int):
    """Posterior coefficients between two (possibly non-adjacent) timesteps.

    Returns (g0, g1, g2, std) for q(y_lo | y_hi, y_0, z) where the
    effective one-step alpha is cum_alpha[t_hi]/cum_alpha[t_lo]; reduces to
    `posterior_coefficients` plus std = sqrt(g3 * beta_t) when t_lo = t_hi - 1.
    """
    s._check_t(t_hi, low=1)
    if not (0 <= t_lo < t_hi):
        raise ScheduleError(f"need 0 <= t_lo < t_hi, got ({t_lo}, {t_hi})")
    perstep_eff = float(s.cum_alpha[t_hi] / s.cum_alpha[t_lo])
    g0, g1, g2, g3 = _gammas_from_alphas(perstep_eff, s.cum_alpha[t_lo], s.cum_alpha[t_hi])
    std = float(np.sqrt(g3 * (1.0 - perstep_eff)))
    return float(g0), float(g1), float(g2), std


def conjugacy_oracle(s: DiffusionSchedule, t: int, y0: float, z: float, yt: float,
                     t_lo: int | None = None) -> tuple[float, float]:
    """Posterior mean/variance by direct Gaussian conjugacy (scalar case).

    Multiplies the step likelihood q(y_t | y_prev, z) with the marginal
    q(y_prev | y_0, z) and completes the square: the posterior precision is
    the sum of the two precisions.  Kept free of the gamma arrays so it can
    referee them.
    """
    s._check_t(t, low=2 if t_lo is None else 1)
    t_lo = t - 1 if t_lo is None else int(t_lo)
    if not (0 <= t_lo < t):
        raise ScheduleError(f"need 0 <= t_lo < t, got ({t_lo}, {t})")
    perstep = s.cum_alpha[t] / s.cum_alpha[t_lo]
    beta_eff = 1.0 - perstep
    var_marg = 1.0 - s.cum_alpha[t_lo]

    precision = perstep / beta_eff + 1.0 / var_marg
    variance = 1.0 / precision
    mean_like = np.sqrt(perstep) * (yt - (1.0 - np.sqrt(perstep)) * z) / beta_eff
    mean_marg = (np.sqrt(s.cum_alpha[t_lo]) * y0 + (1.0 - np.sqrt(s.cum_alpha[t_lo])) * z) / var_marg
    return float(variance * (mean_like + mean_marg)), float(variance)


def timestep_subsequence(T: int, k: int) -> np.ndarray:
    """Descending timesteps for accelerated sampling.

    k = T gives the full chain T..1.  Otherwise k uniformly spaced steps:
    an exact stride when k divides T (T, T-s, ..., s), else the rounded
    linspace from T down to 1.  The reverse sampler emits its estimate of
    y_0 at the final element instead of stepping past it.
    """
    T, k = int(T), int(k)
    if not (1 <= k <= T):
        raise ScheduleError(f"subsequence length {k} outside [1, {T}]")
    if k == T:
        return np.arange(T, 0, -1, dtype=np.int64)
    if T % k == 0:
        stride = T // k
        return np.arange(T, 0, -stride, dtype=np.int64)
    ts = np.unique(np.round(np.linspace(1, T, k)).astype(np.int64))
    return ts[::-1].copy()
