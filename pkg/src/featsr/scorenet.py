"""Conditional score network with hand-written backpropagation.

A small encoder-decoder (U-Net style) over channels-last images. The noisy
image and the LR conditioning image are concatenated along channels. Each
resolution level owns an embedding ``e = W_t temb(t) + W_f F + b`` built from
the time embedding and the identity feature vector; every residual block
projects ``silu(e)`` to a per-channel scale ``gamma`` and shift ``beta`` and
applies ``h * (1 + gamma) + beta`` after its first convolution.

The raw head ``U`` is converted to a score by ``s = U / marginal_std(t)``.

Parameter count for channels ``c_l = base * 2**l`` (``l < levels``), embedding
width ``E``, feature width ``F``, input channels ``I``, image channels ``I/2``
and stem factor ``p``::

    in.conv        9*p^2*I*c_0 + c_0
    emb{l}         E*E + F*E + E
    down{l}, l>0   9*c_{l-1}*c_l + c_l
    enc{l}         2*(9*c_l^2 + c_l) + 2*c_l*E + 2*c_l
    up{l}, l<L-1   4*c_{l+1}*c_l + c_l
    dec{l}.merge   18*c_l^2 + c_l
    dec{l}         same as enc{l}
    out.conv       9*c_0*p^2*(I/2) + p^2*(I/2)
    skip (if on)   (E + 1)*(I/2)

With ``patch = p > 1`` the concatenated input is folded space-to-depth by
``p`` before the first convolution and the head is unfolded depth-to-space,
so the finest level runs at ``1/p`` resolution. ``patch = 1`` is the plain
full-resolution network.

With ``skip = 1`` the head gains a learned term ``(W_s temb(t) + b_s) * x_in``,
where ``x_in`` is the preconditioned noisy image. ``W_s`` and ``b_s`` start at
zero, so a zero-initialized head still outputs exactly zero. At high noise the
target ``-z`` is almost ``-x_in``, which this path carries without the
encoder-decoder having to reproduce it.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidStateError
from .numerics import (
    RngStream,
    conv2d,
    conv2d_backward,
    conv2d_transpose,
    conv2d_transpose_backward,
    read_tensor_blob,
    tensor_to_bytes,
)
from .sde import NoiseSchedule, marginal_std, marginal_var, sigma

# data-scale constant for the input preconditioning 1/sqrt(var(t) + SIGMA_DATA^2)
SIGMA_DATA = 0.5
# multiplies the normalized log-noise level before the sinusoidal frequencies
EMBED_POSITION_SCALE = 1000.0

CKPT_MAGIC = b"FASRCKPT"


@dataclass(frozen=True)
class ArchDescriptor:
    in_channels: int = 2
    base_channels: int = 16
    levels: int = 3
    embed_dim: int = 64
    feature_dim: int = 32
    patch: int = 1
    # learned per-channel skip from the preconditioned x_t to the raw head (0 = off)
    skip: int = 0

    def __post_init__(self):
        if self.in_channels < 2 or self.in_channels % 2:
            raise ValueError("in_channels must be twice the image channel count")
        if self.base_channels < 1 or self.levels < 1 or self.feature_dim < 1:
            raise ValueError("base_channels, levels and feature_dim must be positive")
        if self.embed_dim < 2 or self.embed_dim % 2:
            raise ValueError("embed_dim must be a positive even integer")
        if self.patch < 1:
            raise ValueError("patch must be >= 1")
        if self.skip not in (0, 1):
            raise ValueError("skip must be 0 or 1")

    @property
    def image_channels(self) -> int:
        return self.in_channels // 2

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    @property
    def side_multiple(self) -> int:
        """Image sides must be divisible by this."""
        return self.patch * 2 ** (self.levels - 1)

    def as_vector(self) -> np.ndarray:
        return np.array(
            [self.in_channels, self.base_channels, self.levels, self.embed_dim, self.feature_dim, self.patch,
             self.skip],
            dtype=np.float64,
        )

    @classmethod
    def from_vector(cls, v) -> ArchDescriptor:
        return cls(*(int(round(float(x))) for x in v))


@dataclass(frozen=True)
class EmbeddingSpec:
    embed_dim: int = 64
    base: float = 1e4


def parameter_count(arch: ArchDescriptor) -> int:
    """Closed-form parameter count (see module docstring)."""
    I, E, F, L = arch.in_channels, arch.embed_dim, arch.feature_dim, arch.levels
    c = [arch.channels(l) for l in range(L)]
    p2 = arch.patch**2
    n = 9 * p2 * I * c[0] + c[0]
    for l in range(L):
        res = 2 * (9 * c[l] ** 2 + c[l]) + 2 * c[l] * E + 2 * c[l]
        n += E * E + F * E + E + res
        if l > 0:
            n += 9 * c[l - 1] * c[l] + c[l]
        if l < L - 1:
            n += 4 * c[l + 1] * c[l] + c[l] + 18 * c[l] ** 2 + c[l] + res
    n += 9 * c[0] * p2 * arch.image_channels + p2 * arch.image_channels
    if arch.skip:
        n += (E + 1) * arch.image_channels
    return n


def time_embedding(t, spec: EmbeddingSpec, sched: NoiseSchedule) -> np.ndarray:
    """Sinusoidal embedding of the normalized log noise level ``ln sigma(t) / ln sigma_max``.

    Returns shape ``(embed_dim,)`` for scalar ``t`` and ``(N, embed_dim)`` for
    an array of times: sines of ``embed_dim/2`` geometrically spaced
    frequencies followed by the matching cosines.
    """
    if spec.embed_dim % 2 or spec.embed_dim < 2:
        raise ValueError(f"embed_dim must be even and positive, got {spec.embed_dim}")
    u = np.log(np.asarray(sigma(sched, t))) / math.log(sched.sigma_max)
    half = spec.embed_dim // 2
    freqs = spec.base ** (-np.arange(half) / half)
    ang = EMBED_POSITION_SCALE * np.multiply.outer(u, freqs)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _sigmoid(x):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def _silu(x):
    return x * _sigmoid(x)


def _dsilu(x, g):
    s = _sigmoid(x)
    return g * (s * (1.0 + x * (1.0 - s)))


def init_params(arch: ArchDescriptor, rng: RngStream, zero_head: bool = True) -> dict[str, np.ndarray]:
    """Random initialization; the output convolution starts at zero unless ``zero_head`` is off."""
    gen = rng.generator
    E, F = arch.embed_dim, arch.feature_dim
    p: dict[str, np.ndarray] = {}

    def conv(name, k, cin, cout):
        p[f"{name}.w"] = gen.standard_normal((k, k, cin, cout)) * math.sqrt(1.0 / (k * k * cin))
        p[f"{name}.b"] = np.zeros(cout)

    def resblock(name, c):
        conv(f"{name}.conv1", 3, c, c)
        p[f"{name}.ss.w"] = gen.standard_normal((E, 2 * c)) * math.sqrt(1.0 / E)
        p[f"{name}.ss.b"] = np.zeros(2 * c)
        conv(f"{name}.conv2", 3, c, c)

    L = arch.levels
    p2 = arch.patch**2
    conv("in.conv", 3, p2 * arch.in_channels, arch.channels(0))
    for l in range(L):
        c = arch.channels(l)
        p[f"emb{l}.wt"] = gen.standard_normal((E, E)) * math.sqrt(2.0 / E)
        p[f"emb{l}.wf"] = gen.standard_normal((F, E))
        p[f"emb{l}.b"] = np.zeros(E)
        if l > 0:
            conv(f"down{l}", 3, arch.channels(l - 1), c)
        resblock(f"enc{l}", c)
    for l in reversed(range(L - 1)):
        c = arch.channels(l)
        # transposed kernel layout (kh, kw, C_out, C_in)
        p[f"up{l}.w"] = gen.standard_normal((2, 2, c, arch.channels(l + 1))) * math.sqrt(1.0 / arch.channels(l + 1))
        p[f"up{l}.b"] = np.zeros(c)
        conv(f"dec{l}.merge", 3, 2 * c, c)
        resblock(f"dec{l}", c)
    conv("out.conv", 3, arch.channels(0), p2 * arch.image_channels)
    if zero_head:
        p["out.conv.w"][...] = 0.0
    if arch.skip:
        p["skip.w"] = np.zeros((E, arch.image_channels))
        p["skip.b"] = np.zeros(arch.image_channels)
    return p


def space_to_depth(x: np.ndarray, p: int) -> np.ndarray:
    if p == 1:
        return x
    n, h, w, c = x.shape
    return x.reshape(n, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h // p, w // p, p * p * c)


def depth_to_space(x: np.ndarray, p: int) -> np.ndarray:
    if p == 1:
        return x
    n, h, w, c = x.shape
    c //= p * p
    return x.reshape(n, h, w, p, p, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h * p, w * p, c)


def _as_batch_time(t, n: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return np.full(n, float(t))
    if t.shape != (n,):
        raise ValueError(f"time array has shape {t.shape}, expected ({n},)")
    return t


def _check_inputs(arch: ArchDescriptor, x_t, y, F):
    if x_t.ndim != 4 or y.shape != x_t.shape:
        raise ValueError(f"x_t and y must share shape (N,H,W,C); got {x_t.shape} and {y.shape}")
    if x_t.shape[3] != arch.image_channels:
        raise ValueError(f"expected {arch.image_channels} image channels, got {x_t.shape[3]}")
    side = arch.side_multiple
    if x_t.shape[1] % side or x_t.shape[2] % side:
        raise ValueError(f"image side must be divisible by {side}")
    if F.shape != (x_t.shape[0], arch.feature_dim):
        raise ValueError(f"features must have shape ({x_t.shape[0]}, {arch.feature_dim}), got {F.shape}")


def forward_cached(params, arch: ArchDescriptor, sched: NoiseSchedule, x_t, y, F, t, keep_cache: bool = True):
    """Functional forward pass. Returns ``(score, raw_head, cache)``; ``cache`` is None unless requested."""
    x_t = np.asarray(x_t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    F = np.asarray(F, dtype=np.float64)
    if F.ndim == 1:
        F = np.broadcast_to(F, (x_t.shape[0], F.shape[0]))
    _check_inputs(arch, x_t, y, F)
    n = x_t.shape[0]
    tt = _as_batch_time(t, n)
    P = params
    L = arch.levels
    cache: dict = {} if keep_cache else None

    def conv(name, h, stride=1, padding=1):
        if keep_cache:
            cache[name] = h
        return conv2d(h, P[f"{name}.w"], P[f"{name}.b"], stride=stride, padding=padding)

    def act(name, h):
        if keep_cache:
            cache[name] = h
        return _silu(h)

    def resblock(name, h, a):
        u = conv(f"{name}.conv1", act(f"{name}.act1", h))
        gb = a @ P[f"{name}.ss.w"] + P[f"{name}.ss.b"]
        c = u.shape[3]
        gamma, beta = gb[:, None, None, :c], gb[:, None, None, c:]
        if keep_cache:
            cache[f"{name}.u"] = u
            cache[f"{name}.gamma"] = gamma
        v = u * (1.0 + gamma) + beta
        return h + conv(f"{name}.conv2", act(f"{name}.act2", v))

    temb = time_embedding(tt, EmbeddingSpec(arch.embed_dim), sched)
    c_in = 1.0 / np.sqrt(np.asarray(marginal_var(sched, tt)) + SIGMA_DATA**2)
    inp = np.concatenate([c_in[:, None, None, None] * (x_t - 0.5), 2.0 * y - 1.0], axis=3)

    acts = []
    for l in range(L):
        e = temb @ P[f"emb{l}.wt"] + F @ P[f"emb{l}.wf"] + P[f"emb{l}.b"]
        acts.append(act(f"emb{l}.act", e))
        if keep_cache:
            cache[f"emb{l}.a"] = acts[-1]
    if keep_cache:
        cache["temb"], cache["F"] = temb, F

    h = conv("in.conv", space_to_depth(inp, arch.patch))
    skips = []
    for l in range(L):
        if l > 0:
            h = conv(f"down{l}", act(f"down{l}.act", h), stride=2)
        h = resblock(f"enc{l}", h, acts[l])
        skips.append(h)
    for l in reversed(range(L - 1)):
        hs = act(f"up{l}.act", h)
        if keep_cache:
            cache[f"up{l}"] = hs
        h = conv2d_transpose(hs, P[f"up{l}.w"], P[f"up{l}.b"], stride=2)
        h = np.concatenate([h, skips[l]], axis=3)
        h = conv(f"dec{l}.merge", act(f"dec{l}.merge.act", h))
        h = resblock(f"dec{l}", h, acts[l])
    raw = depth_to_space(conv("out.conv", act("out.act", h)), arch.patch)
    if arch.skip:
        xin = inp[..., : arch.image_channels]
        raw = raw + (temb @ P["skip.w"] + P["skip.b"])[:, None, None, :] * xin
        if keep_cache:
            cache["skip.x"] = xin
    std = np.asarray(marginal_std(sched, tt))
    if keep_cache:
        cache["std"] = std
        cache["shape"] = x_t.shape
    return raw / std[:, None, None, None], raw, cache


def backward_cached(params, arch: ArchDescriptor, cache, grad_score) -> dict[str, np.ndarray]:
    """Parameter gradients of ``sum(grad_score * score)`` for a cached forward pass."""
    if cache is None:
        raise InvalidStateError("backward called without a cached forward pass")
    if grad_score.shape != cache["shape"]:
        raise ValueError(f"output gradient shape {grad_score.shape} does not match {cache['shape']}")
    P = params
    L = arch.levels
    g: dict[str, np.ndarray] = {}

    def conv_b(name, dout, stride=1, padding=1):
        dx, dw = conv2d_backward(cache[name], P[f"{name}.w"], dout, stride=stride, padding=padding)
        g[f"{name}.w"] = dw
        g[f"{name}.b"] = dout.sum(axis=(0, 1, 2))
        return dx

    def act_b(name, dout):
        return _dsilu(cache[name], dout)

    dacts = [np.zeros_like(cache[f"emb{l}.act"]) for l in range(L)]

    def resblock_b(name, dh, l):
        dv = act_b(f"{name}.act2", conv_b(f"{name}.conv2", dh))
        u, gamma = cache[f"{name}.u"], cache[f"{name}.gamma"]
        dgamma = (dv * u).sum(axis=(1, 2))
        dbeta = dv.sum(axis=(1, 2))
        dgb = np.concatenate([dgamma, dbeta], axis=1)
        a = cache[f"emb{l}.a"]
        g[f"{name}.ss.w"] = a.T @ dgb
        g[f"{name}.ss.b"] = dgb.sum(axis=0)
        dacts[l] += dgb @ P[f"{name}.ss.w"].T
        du = dv * (1.0 + gamma)
        return dh + act_b(f"{name}.act1", conv_b(f"{name}.conv1", du))

    std = cache["std"]
    draw = grad_score / std[:, None, None, None]
    if arch.skip:
        ds = (draw * cache["skip.x"]).sum(axis=(1, 2))
        g["skip.w"] = cache["temb"].T @ ds
        g["skip.b"] = ds.sum(axis=0)
    dh = act_b("out.act", conv_b("out.conv", space_to_depth(draw, arch.patch)))
    dskips: list = [None] * L
    for l in range(L - 1):
        dh = resblock_b(f"dec{l}", dh, l)
        dcat = act_b(f"dec{l}.merge.act", conv_b(f"dec{l}.merge", dh))
        c = arch.channels(l)
        dup, dskips[l] = dcat[..., :c], dcat[..., c:]
        dhs, dw = conv2d_transpose_backward(cache[f"up{l}"], P[f"up{l}.w"], dup, stride=2)
        g[f"up{l}.w"] = dw
        g[f"up{l}.b"] = dup.sum(axis=(0, 1, 2))
        dh = act_b(f"up{l}.act", dhs)
    for l in reversed(range(L)):
        if dskips[l] is not None:
            dh = dh + dskips[l]
        dh = resblock_b(f"enc{l}", dh, l)
        if l > 0:
            dh = act_b(f"down{l}.act", conv_b(f"down{l}", dh, stride=2))
    conv_b("in.conv", dh)
    temb, F = cache["temb"], cache["F"]
    for l in range(L):
        de = act_b(f"emb{l}.act", dacts[l])
        g[f"emb{l}.wt"] = temb.T @ de
        g[f"emb{l}.wf"] = F.T @ de
        g[f"emb{l}.b"] = de.sum(axis=0)
    return {k: g[k] for k in P}


@dataclass
class ScoreNetwork:
    arch: ArchDescriptor
    params: dict[str, np.ndarray]
    sched: NoiseSchedule = field(default_factory=NoiseSchedule)

    def __post_init__(self):
        self._cache = None

    @classmethod
    def create(cls, arch: ArchDescriptor, seed: int = 0, sched: NoiseSchedule | None = None, zero_head: bool = True):
        params = init_params(arch, RngStream(seed, 0x5C0E), zero_head=zero_head)
        return cls(arch, params, sched or NoiseSchedule())

    def forward(self, x_t, y, F, t, keep_cache: bool = False, return_raw: bool = False):
        """Score estimate for noisy images ``x_t`` (N,H,W,C) given LR images ``y`` and features ``F``.

        ``F`` may be a single vector shared by the batch. With ``keep_cache`` the
        activations needed by :meth:`backward` are stored on the instance.
        """
        score, raw, cache = forward_cached(self.params, self.arch, self.sched, x_t, y, F, t, keep_cache)
        self._cache = cache if keep_cache else None
        return raw if return_raw else score

    def backward(self, grad_score) -> dict[str, np.ndarray]:
        return backward_cached(self.params, self.arch, self._cache, grad_score)

    def score_fn(self, y, F):
        """Closure ``(x, t) -> score`` for the sampler, conditioned on fixed ``y`` and ``F``."""

        def fn(x, t):
            return forward_cached(self.params, self.arch, self.sched, x, y, F, t, keep_cache=False)[0]

        return fn

    @property
    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def copy(self) -> ScoreNetwork:
        return ScoreNetwork(self.arch, {k: v.copy() for k, v in self.params.items()}, self.sched)


# ---------------------------------------------------------------------------
# checkpoints: b"FASRCKPT", u32 record count, records of
# (u16 LE name length, UTF-8 name, TNSR blob)


def write_checkpoint(path, records: dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(tensor_to_bytes(arr))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def read_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    fh = io.BytesIO(data)
    if fh.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    raw = fh.read(4)
    if len(raw) != 4:
        raise FormatError(f"{path}: truncated record count")
    (count,) = struct.unpack("<I", raw)
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        raw = fh.read(2)
        if len(raw) != 2:
            raise FormatError(f"{path}: truncated before record {i}")
        (nlen,) = struct.unpack("<H", raw)
        name_raw = fh.read(nlen)
        if len(name_raw) != nlen:
            raise FormatError(f"{path}: truncated name of record {i}")
        name = name_raw.decode("utf-8")
        out[name] = read_tensor_blob(fh, name=name)
    if fh.read(1):
        raise FormatError(f"{path}: trailing bytes after {count} records")
    return out


def save(net: ScoreNetwork, path, extra: dict[str, np.ndarray] | None = None) -> None:
    """Write ``net``'s parameters (plus optional extra records) as a checkpoint."""
    records = {"__arch__": net.arch.as_vector()}
    records.update({f"params/{k}": v for k, v in net.params.items()})
    if extra:
        records.update(extra)
    write_checkpoint(path, records)


def load(path, sched: NoiseSchedule | None = None, use_ema: bool = False) -> ScoreNetwork:
    """Load a checkpoint. With ``use_ema`` the EMA shadow weights are used when present."""
    records = read_checkpoint(path)
    if "__arch__" not in records:
        raise FormatError(f"{path}: missing architecture record")
    arch = ArchDescriptor.from_vector(records["__arch__"])
    prefix = "ema/" if use_ema and any(k.startswith("ema/") for k in records) else "params/"
    params = {k[len(prefix) :]: v for k, v in records.items() if k.startswith(prefix)}
    expected = init_params(arch, RngStream(0))
    for k, v in expected.items():
        if k not in params:
            raise FormatError(f"{path}: missing tensor {prefix}{k}")
        if params[k].shape != v.shape:
            raise FormatError(f"{path}: tensor {prefix}{k} has shape {params[k].shape}, expected {v.shape}")
    return ScoreNetwork(arch, {k: params[k] for k in expected}, sched or NoiseSchedule())
