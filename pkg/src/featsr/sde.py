"""Variance-exploding SDE: noise schedule, diffusion coefficient and transition kernel.

The forward process has zero drift and noise level
``sigma(t) = sigma_min * (sigma_max / sigma_min) ** (t / T)``, so the
perturbation kernel ``p(x_t | x_0)`` is Gaussian with mean ``x_0`` and
variance ``sigma(t)**2 - sigma(0)**2`` per coordinate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import RngStream, gaussian

SIGMA_MIN = 0.001
SIGMA_MAX = 348.0


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = SIGMA_MIN
    sigma_max: float = SIGMA_MAX
    T: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.sigma_min < self.sigma_max):
            raise ValueError(
                f"noise schedule requires 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}"
            )
        if not self.T > 0:
            raise ValueError(f"noise schedule requires T > 0, got {self.T}")

    @property
    def t_floor(self) -> float:
        """Smallest time used for training and sampling (the kernel is singular at 0)."""
        return 1e-5 * self.T

    @property
    def log_ratio(self) -> float:
        return math.log(self.sigma_max / self.sigma_min)


def _check_time(sched: NoiseSchedule, t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > sched.T) or np.any(np.isnan(t)):
        raise ValueError(f"time outside [0, {sched.T}]: {t}")
    return t


def _out(v):
    return float(v) if np.ndim(v) == 0 else v


def sigma(sched: NoiseSchedule, t):
    """Noise level at time ``t`` (scalar or array)."""
    t = _check_time(sched, t)
    return _out(sched.sigma_min * (sched.sigma_max / sched.sigma_min) ** (t / sched.T))


def diffusion_coeff(sched: NoiseSchedule, t):
    """``g(t) = sqrt(d sigma^2 / dt) = sigma(t) * sqrt(2 ln(sigma_max/sigma_min) / T)``."""
    return _out(np.asarray(sigma(sched, t)) * math.sqrt(2.0 * sched.log_ratio / sched.T))


def marginal_var(sched: NoiseSchedule, t):
    s = np.asarray(sigma(sched, t))
    return _out(s * s - sched.sigma_min**2)


def marginal_std(sched: NoiseSchedule, t):
    """Standard deviation ``sqrt(sigma(t)^2 - sigma(0)^2)`` of the perturbation kernel."""
    return _out(np.sqrt(np.maximum(np.asarray(marginal_var(sched, t)), 0.0)))


def _broadcast_time(v, x: np.ndarray) -> np.ndarray:
    """Reshape a per-sample time quantity ``(N,)`` so it broadcasts over ``x`` ``(N, ...)``."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 0:
        return v
    return v.reshape(v.shape + (1,) * (x.ndim - v.ndim))


def perturb(x0: np.ndarray, t, sched: NoiseSchedule, rng: RngStream | None = None, z: np.ndarray | None = None):
    """Sample ``x_t = x0 + marginal_std(t) * z``.

    ``z`` may be supplied directly (it must have ``x0``'s shape); otherwise it is
    drawn from ``rng``. ``t`` may be a scalar or a per-sample array of length
    ``x0.shape[0]``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if z is None:
        if rng is None:
            raise ValueError("perturb needs either rng or z")
        z = gaussian(rng, x0.shape)
    elif z.shape != x0.shape:
        raise ValueError(f"noise shape {z.shape} does not match x0 shape {x0.shape}")
    return x0 + _broadcast_time(marginal_std(sched, t), x0) * z


def analytic_score(x_t: np.ndarray, x0: np.ndarray, t, sched: NoiseSchedule) -> np.ndarray:
    """Score ``-(x_t - x0) / (sigma(t)^2 - sigma(0)^2)`` of the Gaussian perturbation kernel."""
    x_t = np.asarray(x_t, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    if x_t.shape != x0.shape:
        raise ValueError(f"shape mismatch {x_t.shape} vs {x0.shape}")
    tt = _check_time(sched, t)
    if np.any(tt <= sched.t_floor):
        raise ValueError(f"t={t} is at or below t_floor={sched.t_floor}; the kernel is numerically singular")
    return -(x_t - x0) / _broadcast_time(marginal_var(sched, t), x_t)


def log_kernel_density(x_t, x0, t, sched: NoiseSchedule) -> float:
    """Log density of the isotropic Gaussian perturbation kernel (used as a test oracle)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    var = marginal_var(sched, t)
    d = x_t.size
    return float(-0.5 * np.sum((x_t - x0) ** 2) / var - 0.5 * d * math.log(2.0 * math.pi * var))
