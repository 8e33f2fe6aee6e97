"""Self-checks run by ``featsr check``: schedule, gradients, forward SDE, metric oracles."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import evalkit
from .numerics import RngStream, gaussian
from .scorenet import ArchDescriptor, ScoreNetwork
from .sde import NoiseSchedule, diffusion_coeff, marginal_var, sigma


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str = ""


def check_schedule(sched: NoiseSchedule) -> list[CheckResult]:
    out = []
    s0, sT = sigma(sched, 0.0), sigma(sched, sched.T)
    out.append(CheckResult("schedule.endpoints", s0 == sched.sigma_min and math.isclose(sT, sched.sigma_max, rel_tol=1e-12),
                           f"sigma(0)={s0!r} sigma(T)={sT!r}"))
    mid = sigma(sched, sched.T / 2)
    geo = math.sqrt(sched.sigma_min * sched.sigma_max)
    out.append(CheckResult("schedule.midpoint", math.isclose(mid, geo, rel_tol=1e-12), f"sigma(T/2)={mid!r}"))
    worst = 0.0
    for t in np.linspace(0.05, 0.95, 7) * sched.T:
        h = 1e-6 * sched.T
        fd = (sigma(sched, t + h) ** 2 - sigma(sched, t - h) ** 2) / (2 * h)
        worst = max(worst, abs(diffusion_coeff(sched, t) - math.sqrt(fd)) / math.sqrt(fd))
    out.append(CheckResult("schedule.diffusion_coeff", worst < 1e-6, f"max rel err {worst:.2e}"))
    return out


def gradient_check(arch: ArchDescriptor, seed: int = 1, size: int = 8, h: float = 1e-5,
                   corrupt: str | None = None) -> dict[str, float]:
    """Per-parameter relative error of backprop against central differences.

    The scalar loss is ``sum(R * score)`` for a fixed random ``R`` on a batch
    of two images at different times. Error for a tensor is
    ``max|fd - bp| / max|fd|``. ``corrupt`` names a parameter whose analytic
    gradient is perturbed (used to test that failures are reported).
    """
    net = ScoreNetwork.create(arch, seed=seed, zero_head=False)
    g = RngStream(seed, 77).generator
    n = 2
    x = g.standard_normal((n, size, size, arch.image_channels))
    y = g.random((n, size, size, arch.image_channels))
    F = g.standard_normal((n, arch.feature_dim))
    t = np.array([0.3, 0.8]) * net.sched.T
    R = g.standard_normal(x.shape)

    def loss():
        return float(np.sum(R * net.forward(x, y, F, t)))

    net.forward(x, y, F, t, keep_cache=True)
    grads = net.backward(R)
    if corrupt is not None:
        if corrupt not in grads:
            raise ValueError(f"no parameter named {corrupt!r}")
        grads[corrupt] = grads[corrupt] * 1.01 + 1e-3
    errs = {}
    for name, p in net.params.items():
        num = np.zeros_like(p)
        flat, nflat = p.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            a = loss()
            flat[i] = old - h
            b = loss()
            flat[i] = old
            nflat[i] = (a - b) / (2 * h)
        errs[name] = float(np.max(np.abs(num - grads[name])) / max(np.max(np.abs(num)), 1e-12))
    return errs


def check_gradients(corrupt: str | None = None, tol: float = 1e-4) -> list[CheckResult]:
    arch = ArchDescriptor(base_channels=4, levels=3, embed_dim=8, feature_dim=4)
    errs = gradient_check(arch, corrupt=corrupt)
    return [CheckResult(f"gradient.{k}", e < tol, f"rel err {e:.2e}") for k, e in errs.items()]


def check_forward_sde(sched: NoiseSchedule, trials: int = 10_000, steps: int = 1000, seed: int = 5) -> list[CheckResult]:
    """Euler-Maruyama on dx = g dw from 0 against the closed-form kernel variance."""
    rng = RngStream(seed, 0)
    x = np.zeros(trials)
    dt = sched.T / steps
    out = []
    marks = {int(round(f * steps)): f for f in (0.3, 0.7, 1.0)}
    for i in range(steps):
        x = x + diffusion_coeff(sched, i * dt) * math.sqrt(dt) * gaussian(rng, trials)
        if i + 1 in marks:
            t = (i + 1) * dt
            ratio = float(np.var(x)) / marginal_var(sched, t)
            ok = abs(ratio - 1.0) < 0.05
            out.append(CheckResult(f"forward_sde.t={marks[i + 1]:.1f}", ok, f"var ratio {ratio:.3f}"))
    return out


def _brute_auc(gen, imp):
    s = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in gen for b in imp)
    return s / (len(gen) * len(imp))


def _brute_rank(sim, k):
    hits = 0
    for i, row in enumerate(sim.values):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        hits += sim.true_match[i] in order[:k]
    return hits / len(sim.values)


def check_metrics(trials: int = 10, seed: int = 9) -> list[CheckResult]:
    g = RngStream(seed, 0).generator
    bad = 0
    for _ in range(trials):
        v = np.round(g.uniform(-1, 1, (20, 20)), 1)  # coarse grid forces ties
        sim = evalkit.SimilarityMatrix(v, g.permutation(20))
        if evalkit.verification_auc(sim.genuine(), sim.impostor()) != _brute_auc(sim.genuine(), sim.impostor()):
            bad += 1
        for k in (1, 5, 10):
            if evalkit.cmc_rank_k(sim, k) != _brute_rank(sim, k):
                bad += 1
    return [CheckResult("metrics.oracles", bad == 0, f"{bad} mismatches")]


def run_all(sched_factory: Callable[[], NoiseSchedule], corrupt: str | None = None) -> list[CheckResult]:
    """All diagnostics. ``sched_factory`` builds the configured schedule; a failure to build it is reported."""
    results: list[CheckResult] = []
    try:
        sched = sched_factory()
    except ValueError as e:
        results.append(CheckResult("schedule.invariants", False, str(e)))
        sched = None
    if sched is not None:
        results.append(CheckResult("schedule.invariants", True))
        results += check_schedule(sched)
        results += check_forward_sde(sched)
    results += check_gradients(corrupt)
    results += check_metrics()
    return results
