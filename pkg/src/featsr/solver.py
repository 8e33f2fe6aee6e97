"""Reverse-time Euler-Maruyama sampler for the variance-exploding SDE."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DivergedSampleError
from .numerics import RngStream, gaussian
from .sde import NoiseSchedule, diffusion_coeff, sigma

ScoreFn = Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 2000
    sched: NoiseSchedule = field(default_factory=NoiseSchedule)
    denoise_final: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"sampler needs steps >= 1, got {self.steps}")

    @property
    def dt(self) -> float:
        return (self.sched.T - self.sched.t_floor) / self.steps

    def time_grid(self) -> np.ndarray:
        """Times ``t_0 = T > t_1 > ... > t_steps = t_floor``; step ``i`` integrates ``t_i -> t_{i+1}``."""
        grid = self.sched.T - self.dt * np.arange(self.steps + 1)
        grid[0], grid[-1] = self.sched.T, self.sched.t_floor
        return grid


def em_reverse_step(
    x: np.ndarray,
    t: float,
    dt: float,
    score: np.ndarray,
    sched: NoiseSchedule,
    rng: RngStream | None = None,
    z: np.ndarray | None = None,
) -> np.ndarray:
    """One reverse-time step ``x + g(t)^2 * score * dt + g(t) * sqrt(dt) * z``.

    Pass ``z`` to fix the Wiener increment (it must match ``x``'s shape);
    otherwise a fresh standard normal draw is taken from ``rng``.
    """
    if score.shape != x.shape:
        raise ValueError(f"score shape {score.shape} does not match x shape {x.shape}")
    if dt < 0 or dt > t:
        raise ValueError(f"need 0 <= dt <= t, got dt={dt}, t={t}")
    if z is None:
        z = gaussian(rng, x.shape)
    elif z.shape != x.shape:
        raise ValueError(f"noise shape {z.shape} does not match x shape {x.shape}")
    g = diffusion_coeff(sched, t)
    return x + (g * g * dt) * score + (g * np.sqrt(dt)) * z


def sample(
    score_fn: ScoreFn,
    shape: Sequence[int],
    cfg: SamplerConfig,
    rng: RngStream,
    trace: list | None = None,
) -> np.ndarray:
    """Integrate the reverse SDE from pure noise at ``T`` down to ``t_floor``.

    The chain starts from ``sigma(T) * z``. When ``cfg.denoise_final`` is set, a
    final noise-free step ``x + sigma(t_floor)^2 * score(x, t_floor)`` removes
    the residual noise left at the floor.

    If ``trace`` is a list, one ``(step, t, ||x||_2)`` tuple is appended per
    step, recorded at the step's starting time, followed by a final row at
    ``t_floor``.

    Raises:
        DivergedSampleError: a non-finite value appeared; ``.step`` holds the index.
    """
    sched = cfg.sched
    grid = cfg.time_grid()
    dt = cfg.dt
    x = sigma(sched, sched.T) * gaussian(rng, shape)
    for i in range(cfg.steps):
        t = float(grid[i])
        if trace is not None:
            trace.append((i, t, float(np.linalg.norm(x))))
        x = em_reverse_step(x, t, dt, score_fn(x, t), sched, rng)
        if not np.all(np.isfinite(x)):
            raise DivergedSampleError("non-finite value in reverse SDE", i)
    t_end = float(grid[-1])
    if cfg.denoise_final:
        x = x + sigma(sched, t_end) ** 2 * score_fn(x, t_end)
        if not np.all(np.isfinite(x)):
            raise DivergedSampleError("non-finite value in final denoising step", cfg.steps)
    if trace is not None:
        trace.append((cfg.steps, t_end, float(np.linalg.norm(x))))
    return x


def write_trace(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "t", "x_norm"])
        for step, t, norm in trace:
            w.writerow([step, repr(t), repr(norm)])
