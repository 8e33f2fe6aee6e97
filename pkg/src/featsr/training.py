"""Denoising score matching with Adam and an EMA shadow of the weights.

Each training example carries its own RngStream, so the noise level ``t``
and noise ``z`` drawn for it do not depend on how the batch is split. The
batch is cut into fixed microbatches whose gradients are summed in a fixed
order; a thread pool may evaluate the microbatches concurrently without
changing the result.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, FormatError, TrainingDivergenceError
from .numerics import RngStream, gaussian
from .scorenet import ScoreNetwork, backward_cached, forward_cached, read_checkpoint, write_checkpoint
from .sde import NoiseSchedule, marginal_std, marginal_var
from . import synthdata

log = logging.getLogger(__name__)

# high bit of the stream id for training examples (keeps them apart from the
# per-identity streams of evaluation datasets)
_TRAIN_STREAM_BASE = 1 << 48


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 16
    learning_rate: float = 2e-4
    ema_decay: float = 0.999
    seed: int = 0
    microbatch: int = 4
    threads: int = 1
    log_every: int = 10
    checkpoint_every: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in [0, 1)")
        if self.microbatch < 1 or self.threads < 1 or self.log_every < 1 or self.checkpoint_every < 0:
            raise ConfigError("microbatch, threads and log_every must be >= 1; checkpoint_every >= 0")


def loss_weight(sched: NoiseSchedule, t):
    """lambda(t) = sigma(t)^2 - sigma(0)^2, the kernel variance."""
    return marginal_var(sched, t)


# ---------------------------------------------------------------------------
# loss


def draw_noise(rngs: list[RngStream], shape, sched: NoiseSchedule):
    """Per-example ``t ~ U[t_floor, T]`` and ``z ~ N(0, I)`` from each example's own stream."""
    t = np.array([r.generator.uniform(sched.t_floor, sched.T) for r in rngs])
    z = np.stack([gaussian(r, shape) for r in rngs])
    return t, z


def dsm_terms(params, arch, sched, x0, y, F, t, z, weighting=loss_weight, raw_hook=None):
    """Summed weighted DSM loss over the given examples and its gradient w.r.t. the score.

    Returns ``(per_example_losses, grad_score, cache)`` where
    ``per_example_losses[i] = weighting(t_i) * ||s_i - target_i||^2`` and
    ``target_i = -z_i / marginal_std(t_i)``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    std = np.asarray(marginal_std(sched, t)).reshape(-1, 1, 1, 1)
    x_t = x0 + std * z
    score, raw, cache = forward_cached(params, arch, sched, x_t, y, F, t, keep_cache=raw_hook is None)
    if raw_hook is not None:
        score = raw_hook(raw, z) / std
    lam = np.asarray(weighting(sched, t)).reshape(-1, 1, 1, 1)
    resid = score + z / std
    per = (lam * resid * resid).sum(axis=(1, 2, 3))
    return per, 2.0 * lam * resid, cache


def dsm_loss(net: ScoreNetwork, x0, y, F, rng: RngStream | None = None, t=None, z=None,
             weighting=loss_weight, raw_hook: Callable | None = None):
    """Batch-mean denoising score matching loss and parameter gradients.

    ``t`` and ``z`` are drawn from ``rng`` unless given. ``raw_hook(raw, z)``
    replaces the raw head before the loss (gradients are then not computed
    and None is returned in their place).

    Raises:
        TrainingDivergenceError: the loss is not finite (``step`` is -1 here).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    n = x0.shape[0]
    if t is None:
        if rng is None:
            raise ValueError("dsm_loss needs rng when t is not given")
        t = rng.generator.uniform(net.sched.t_floor, net.sched.T, size=n)
    if z is None:
        if rng is None:
            raise ValueError("dsm_loss needs rng when z is not given")
        z = gaussian(rng, x0.shape)
    per, gscore, cache = dsm_terms(net.params, net.arch, net.sched, x0, y, F, t, z, weighting, raw_hook)
    loss = float(per.sum() / n)
    if not math.isfinite(loss):
        raise TrainingDivergenceError("non-finite training loss", -1)
    if raw_hook is not None:
        return loss, None
    return loss, backward_cached(net.params, net.arch, cache, gscore / n)


def reduced_dsm_loss(raw: np.ndarray, z: np.ndarray) -> float:
    """Batch mean of ``||U + z||^2``, which the weighted loss reduces to."""
    return float(((raw + z) ** 2).sum(axis=(1, 2, 3)).mean())


# ---------------------------------------------------------------------------
# training data


@dataclass(frozen=True)
class SyntheticSource:
    """Fresh synthetic identities drawn on the fly.

    Example ``index`` renders a new identity: the target is one nuisance
    render, ``y`` its degraded copy, and the condition is the merged feature
    of ``1..max_features`` further degraded renders of the same identity.
    With probability ``p_drop_features`` the features are zeroed, and with
    ``p_drop_lr`` the LR image is, so the corresponding ablations at
    sampling time stay in distribution.
    """

    seed: int = 0
    scale: int = 4
    size: int = synthdata.IMAGE_SIZE
    extractor_seed: int = 0
    feature_dim: int = synthdata.FEATURE_DIM
    max_features: int = 5
    p_drop_features: float = 0.1
    p_drop_lr: float = 0.0

    def example(self, index: int):
        rng = RngStream(self.seed, _TRAIN_STREAM_BASE + index)
        g = rng.generator
        latent = g.uniform(0.0, 1.0, synthdata.LATENT_DIM)
        hr = synthdata.render(latent, synthdata.NuisanceParams.draw(rng), rng, self.size)
        y = synthdata.degrade(hr, self.scale)
        n_feat = int(g.integers(1, self.max_features + 1))
        feats = []
        for _ in range(n_feat):
            img = synthdata.render(latent, synthdata.NuisanceParams.draw(rng), rng, self.size)
            feats.append(synthdata.extract_features(synthdata.degrade(img, self.scale), self.extractor_seed,
                                                    self.feature_dim))
        F = synthdata.merge_features(feats)
        if g.uniform() < self.p_drop_features:
            F = np.zeros_like(F)
        if g.uniform() < self.p_drop_lr:
            y = np.zeros_like(y)
        return hr, y, F, rng


@dataclass(frozen=True)
class DatasetSource:
    """Examples drawn from a stored dataset: gallery images as targets, merged feature images as condition."""

    dataset: synthdata.Dataset
    seed: int = 0
    feature_dim: int = synthdata.FEATURE_DIM
    p_drop_features: float = 0.1
    p_drop_lr: float = 0.0

    def __post_init__(self):
        if len(self.dataset) == 0:
            raise ValueError("training dataset is empty")

    def example(self, index: int):
        rng = RngStream(self.seed, _TRAIN_STREAM_BASE + index)
        g = rng.generator
        rec = self.dataset.records[int(g.integers(len(self.dataset)))]
        hr = rec.hr
        y = synthdata.degrade(hr, self.dataset.scale)
        imgs = rec.feature_images
        k = int(g.integers(1, len(imgs) + 1))
        pick = sorted(g.choice(len(imgs), size=k, replace=False))
        F = synthdata.merge_features(
            [synthdata.extract_features(imgs[i], self.dataset.extractor_seed, self.feature_dim) for i in pick]
        )
        if g.uniform() < self.p_drop_features:
            F = np.zeros_like(F)
        if g.uniform() < self.p_drop_lr:
            y = np.zeros_like(y)
        return hr, y, F, rng


def make_batch(source, step: int, batch_size: int, sched: NoiseSchedule):
    """Examples ``step*batch_size ...`` with their ``t`` and ``z`` draws, stacked NHWC."""
    xs, ys, Fs, rngs = [], [], [], []
    for j in range(batch_size):
        hr, y, F, rng = source.example(step * batch_size + j)
        xs.append(hr)
        ys.append(y)
        Fs.append(F)
        rngs.append(rng)
    x0 = np.stack(xs)[..., None]
    t, z = draw_noise(rngs, x0.shape[1:], sched)
    return x0, np.stack(ys)[..., None], np.stack(Fs), t, z


# ---------------------------------------------------------------------------
# optimizer state


@dataclass
class TrainState:
    net: ScoreNetwork
    ema: dict
    m: dict
    v: dict
    step: int = 0  # number of completed updates

    @classmethod
    def fresh(cls, net: ScoreNetwork) -> TrainState:
        return cls(
            net,
            {k: p.copy() for k, p in net.params.items()},
            {k: np.zeros_like(p) for k, p in net.params.items()},
            {k: np.zeros_like(p) for k, p in net.params.items()},
        )

    def ema_network(self) -> ScoreNetwork:
        return ScoreNetwork(self.net.arch, {k: v.copy() for k, v in self.ema.items()}, self.net.sched)


def adam_update(state: TrainState, grads: dict, cfg: TrainConfig) -> None:
    """One bias-corrected Adam step followed by the EMA update, in place."""
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    d = cfg.ema_decay
    for k, p in state.net.params.items():
        g = grads[k]
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        p -= cfg.learning_rate * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + cfg.eps)
        if d == 0.0:
            state.ema[k] = p.copy()
        else:
            state.ema[k] = d * state.ema[k] + (1.0 - d) * p


def save_state(state: TrainState, path) -> None:
    net = state.net
    rec = {"__arch__": net.arch.as_vector(), "__step__": np.array([state.step], dtype=np.float64)}
    rec["__schedule__"] = np.array([net.sched.sigma_min, net.sched.sigma_max, net.sched.T])
    for prefix, group in (("params/", net.params), ("ema/", state.ema), ("adam_m/", state.m), ("adam_v/", state.v)):
        rec.update({prefix + k: v for k, v in group.items()})
    write_checkpoint(path, rec)


def load_state(path, net: ScoreNetwork) -> TrainState:
    """Restore a training state written by :func:`save_state` into ``net``'s architecture."""
    rec = read_checkpoint(path)
    if "__step__" not in rec:
        raise FormatError(f"{path}: not a training checkpoint (no step record)")
    if not np.array_equal(rec["__arch__"], net.arch.as_vector().astype(np.float32)):
        raise ConfigError(f"{path}: checkpoint architecture does not match the configured one")

    def group(prefix):
        out = {}
        for k, p in net.params.items():
            if prefix + k not in rec:
                raise FormatError(f"{path}: missing tensor {prefix}{k}")
            out[k] = rec[prefix + k].astype(np.float64).reshape(p.shape)
        return out

    net = ScoreNetwork(net.arch, group("params/"), net.sched)
    return TrainState(net, group("ema/"), group("adam_m/"), group("adam_v/"), int(rec["__step__"][0]))


# ---------------------------------------------------------------------------
# loop


def batch_gradients(net: ScoreNetwork, x0, y, F, t, z, cfg: TrainConfig, pool=None):
    """Mean loss and gradients over a batch, split into fixed microbatches.

    Microbatch boundaries depend only on ``cfg.microbatch``, and partial
    results are combined in microbatch order, so ``pool`` only affects speed.
    """
    n = x0.shape[0]
    bounds = [(i, min(i + cfg.microbatch, n)) for i in range(0, n, cfg.microbatch)]

    def work(b):
        lo, hi = b
        per, gscore, cache = dsm_terms(net.params, net.arch, net.sched, x0[lo:hi], y[lo:hi], F[lo:hi],
                                       t[lo:hi], z[lo:hi])
        return per, backward_cached(net.params, net.arch, cache, gscore / n)

    parts = list(pool.map(work, bounds)) if pool is not None else [work(b) for b in bounds]
    loss = float(np.concatenate([p[0] for p in parts]).sum() / n)
    grads = {k: v.copy() for k, v in parts[0][1].items()}
    for _, g in parts[1:]:
        for k in grads:
            grads[k] += g[k]
    return loss, grads


def train(net: ScoreNetwork, source, cfg: TrainConfig, out_dir=None, resume=None, state: TrainState | None = None):
    """Run ``cfg.steps`` optimizer updates (counted from the resumed step, if any).

    Writes ``loss_trace.csv`` (step, loss, ema_loss every ``log_every`` steps)
    and ``checkpoint.fasr`` under ``out_dir`` when given; checkpoints are also
    written every ``checkpoint_every`` steps. Returns ``(state, trace)``.

    Raises:
        TrainingDivergenceError: non-finite loss or parameters; the last
            checkpoint on disk is left untouched.
    """
    if state is None:
        state = load_state(resume, net) if resume is not None else TrainState.fresh(net)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    trace: list[tuple[int, float, float]] = []
    smooth = None
    trace_fh = None
    if out is not None:
        trace_path = out / "loss_trace.csv"
        new = resume is None or not trace_path.exists()
        trace_fh = open(trace_path, "w" if new else "a", newline="")
        writer = csv.writer(trace_fh)
        if new:
            writer.writerow(["step", "loss", "ema_loss"])
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        first = state.step
        for s in range(first, first + cfg.steps):
            x0, y, F, t, z = make_batch(source, s, cfg.batch_size, state.net.sched)
            loss, grads = batch_gradients(state.net, x0, y, F, t, z, cfg, pool)
            if not math.isfinite(loss):
                raise TrainingDivergenceError("non-finite training loss", s + 1)
            adam_update(state, grads, cfg)
            if not all(np.all(np.isfinite(p)) for p in state.net.params.values()):
                raise TrainingDivergenceError("non-finite parameters after update", s + 1)
            smooth = loss if smooth is None else 0.98 * smooth + 0.02 * loss
            if state.step % cfg.log_every == 0 or s == first + cfg.steps - 1:
                trace.append((state.step, loss, smooth))
                if trace_fh is not None:
                    writer.writerow([state.step, repr(loss), repr(smooth)])
                    trace_fh.flush()
                log.info("step %d loss %.4f smoothed %.4f", state.step, loss, smooth)
            if out is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_state(state, out / "checkpoint.fasr")
        if out is not None:
            save_state(state, out / "checkpoint.fasr")
    finally:
        if pool is not None:
            pool.shutdown()
        if trace_fh is not None:
            trace_fh.close()
    return state, trace


def read_trace(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([[float(r["step"]), float(r["loss"]), float(r["ema_loss"])] for r in rows]).reshape(-1, 3)
