"""Synthetic identities, LR degradation, a toy feature extractor and feature merging.

Faces are drawn analytically on a 32x32 grayscale canvas from an 8-number
latent code in [0, 1]:

====  ==========================================
0     face ellipse horizontal semi-axis
1     face ellipse vertical semi-axis
2     eye horizontal offset from the centre line
3     eye height above the face centre
4     eye radius
5     mouth curvature (frown ... smile)
6     face brightness
7     mouth half-width
====  ==========================================

Nuisance draws (integer shift, illumination gain, additive noise) give the
several images per identity.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateFeatureError
from .numerics import RngStream

LATENT_DIM = 8
IMAGE_SIZE = 32
FEATURE_DIM = 32
KEYS_A = -0.5
EXTRACTOR_SMOOTHING = 1.0
SHIFT_STD = 0.6

# stream ids, kept apart so the different consumers never share Philox keys
_EXTRACTOR_STREAM = 0xFEA7_0000


@dataclass(frozen=True)
class NuisanceParams:
    shift: tuple[int, int] = (0, 0)
    gain: float = 1.0
    noise_std: float = 0.0

    def __post_init__(self):
        if any(not -2 <= s <= 2 for s in self.shift):
            raise ValueError(f"shift must lie in [-2, 2]^2, got {self.shift}")
        if not 0.8 <= self.gain <= 1.2:
            raise ValueError(f"gain must lie in [0.8, 1.2], got {self.gain}")
        if not 0.0 <= self.noise_std <= 0.05:
            raise ValueError(f"noise_std must lie in [0, 0.05], got {self.noise_std}")

    @classmethod
    def draw(cls, rng: RngStream) -> NuisanceParams:
        """Random nuisance: shift is a rounded N(0, SHIFT_STD^2) per axis clipped to [-2, 2]; gain and noise uniform."""
        g = rng.generator
        dy, dx = (int(v) for v in np.clip(np.rint(g.normal(0.0, SHIFT_STD, size=2)), -2, 2))
        return cls((dy, dx), float(g.uniform(0.8, 1.2)), float(g.uniform(0.0, 0.05)))


ZERO_NUISANCE = NuisanceParams()


def _soft(d: np.ndarray, width: float = 1.5) -> np.ndarray:
    """Anti-aliased inside indicator for a signed distance (negative inside)."""
    return 0.5 * (1.0 - np.tanh(d / width))


def skin_tone(v: float) -> float:
    """Face brightness for latent ``v``: dark (0.15..0.30) or light (0.70..0.90).

    The band around the 0.5 background is skipped so the face outline always
    has contrast.
    """
    s = 0.15 + 0.35 * v
    return s if s < 0.3 else s + 0.4


def render(latent: Sequence[float], nuisance: NuisanceParams = ZERO_NUISANCE, rng: RngStream | None = None,
           size: int = IMAGE_SIZE) -> np.ndarray:
    """Draw a face image of shape ``(size, size)`` with values in [0, 1].

    ``rng`` is only consulted when ``nuisance.noise_std > 0``.
    """
    lat = np.asarray(latent, dtype=np.float64)
    if lat.shape != (LATENT_DIM,) or np.any(lat < 0.0) or np.any(lat > 1.0) or np.any(np.isnan(lat)):
        raise ValueError(f"latent must be {LATENT_DIM} values in [0, 1]")
    k = size / IMAGE_SIZE
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = (size - 1) / 2.0 + nuisance.shift[0]
    cx = (size - 1) / 2.0 + nuisance.shift[1]
    ry, rx = yy - cy, xx - cx
    edge = 1.5 * k

    a = k * (8.0 + 7.0 * lat[0])
    b = k * (10.0 + 6.0 * lat[1])
    face_d = (np.sqrt((rx / a) ** 2 + (ry / b) ** 2) - 1.0) * min(a, b)
    face = _soft(face_d, edge)

    eye_dx = k * (2.8 + 3.2 * lat[2])
    eye_y = -k * (1.0 + 4.0 * lat[3])
    eye_r = k * (1.5 + 3.0 * lat[4])
    eyes = np.zeros_like(xx)
    for side in (-1.0, 1.0):
        d = np.hypot(rx - side * eye_dx, ry - eye_y) - eye_r
        eyes = np.maximum(eyes, _soft(d, edge))

    mouth_w = k * (2.5 + 3.5 * lat[7])
    curve = k * 6.0 * (lat[5] - 0.5)
    mouth_y = 0.45 * b
    u = np.clip(rx / mouth_w, -1.0, 1.0)
    line_y = mouth_y + curve * (1.0 - u**2)
    d_mouth = np.hypot(rx - u * mouth_w, ry - line_y) - 1.2 * k
    mouth = _soft(d_mouth, edge)

    bg = 0.5
    skin = skin_tone(lat[6])
    img = bg + (skin - bg) * face
    img = img + (0.2 * skin - img) * np.maximum(eyes, mouth) * face
    img = nuisance.gain * img
    if nuisance.noise_std > 0.0:
        if rng is None:
            raise ValueError("render with noise needs an rng")
        img = img + nuisance.noise_std * rng.generator.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# degradation: block-average downsample, Keys bicubic upsample


def keys_kernel(x, a: float = KEYS_A):
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


def block_downsample(x: np.ndarray, scale: int, axis: int = 0) -> np.ndarray:
    """Average consecutive blocks of ``scale`` samples along ``axis``."""
    x = np.moveaxis(np.asarray(x, dtype=np.float64), axis, 0)
    if x.shape[0] % scale:
        raise ValueError(f"length {x.shape[0]} is not divisible by scale {scale}")
    acc = x[0::scale].copy()
    for k in range(1, scale):
        acc = acc + x[k::scale]
    return np.moveaxis(acc / scale, 0, axis)


@lru_cache(maxsize=32)
def _bicubic_taps(n_in: int, scale: int):
    n_out = n_in * scale
    pos = (np.arange(n_out) + 0.5) / scale - 0.5
    base = np.floor(pos).astype(np.int64)
    idx = [np.clip(base + k, 0, n_in - 1) for k in (-1, 0, 1, 2)]
    wts = [keys_kernel(pos - (base + k)) for k in (-1, 0, 1, 2)]
    return idx, wts


def bicubic_upsample(x: np.ndarray, scale: int, axis: int = 0) -> np.ndarray:
    """Upsample by ``scale`` along ``axis`` with the Keys cubic (a=-0.5), edge replication.

    Output sample ``i`` sits at source coordinate ``(i + 0.5)/scale - 0.5``;
    the four taps are summed left to right.
    """
    x = np.moveaxis(np.asarray(x, dtype=np.float64), axis, 0)
    idx, wts = _bicubic_taps(x.shape[0], scale)
    shape = (-1,) + (1,) * (x.ndim - 1)
    out = wts[0].reshape(shape) * x[idx[0]]
    for k in (1, 2, 3):
        out = out + wts[k].reshape(shape) * x[idx[k]]
    return np.moveaxis(out, 0, axis)


def degrade(hr: np.ndarray, scale: int = 4) -> np.ndarray:
    """LR version of an image at the original size: block average by ``scale``, bicubic back up, clip to [0, 1].

    Rows (axis 0) are processed before columns in both stages.
    """
    hr = np.asarray(hr, dtype=np.float64)
    if scale < 1 or hr.shape[0] % scale or hr.shape[1] % scale:
        raise ValueError(f"image shape {hr.shape} is not divisible by scale {scale}")
    if scale == 1:
        return hr.copy()
    lo = block_downsample(block_downsample(hr, scale, 0), scale, 1)
    up = bicubic_upsample(bicubic_upsample(lo, scale, 0), scale, 1)
    return np.clip(up, 0.0, 1.0)


# ---------------------------------------------------------------------------
# features


@lru_cache(maxsize=8)
def projection_matrix(extractor_seed: int, feature_dim: int = FEATURE_DIM, size: int = IMAGE_SIZE) -> np.ndarray:
    """Rows are Gaussian random fields on the image grid, unit norm.

    White Gaussian rows are low-pass filtered with a periodic Gaussian of
    width ``EXTRACTOR_SMOOTHING`` pixels, which makes the feature tolerant of
    the small shifts in the nuisance model.
    """
    rng = RngStream(extractor_seed, _EXTRACTOR_STREAM)
    white = rng.generator.standard_normal((feature_dim, size, size))
    f = np.fft.fftfreq(size)
    h = np.exp(-2.0 * (math.pi * EXTRACTOR_SMOOTHING * size / IMAGE_SIZE) ** 2 * (f[:, None] ** 2 + f[None, :] ** 2))
    P = np.real(np.fft.ifft2(np.fft.fft2(white) * h)).reshape(feature_dim, size * size)
    P /= np.linalg.norm(P, axis=1, keepdims=True)
    P.setflags(write=False)
    return P


def extract_features(img: np.ndarray, extractor_seed: int = 0, feature_dim: int = FEATURE_DIM) -> np.ndarray:
    """Unit-norm identity feature: fixed Gaussian projection of the mean-subtracted image."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ValueError(f"expected a square 2-D image, got shape {img.shape}")
    v = img.ravel() - img.mean()
    f = projection_matrix(extractor_seed, feature_dim, img.shape[0]) @ v
    norm = np.linalg.norm(f)
    if not norm > 1e-12:
        raise DegenerateFeatureError("feature projection is zero (flat image?)")
    return f / norm


def extract_batch(imgs: np.ndarray, extractor_seed: int = 0, feature_dim: int = FEATURE_DIM) -> np.ndarray:
    """Row-wise :func:`extract_features` for a stack ``(N, H, W)``."""
    return np.stack([extract_features(im, extractor_seed, feature_dim) for im in imgs])


def merge_features(features: Sequence[np.ndarray], renormalize: bool = True) -> np.ndarray:
    """Arithmetic mean of feature vectors, renormalized to unit length by default.

    Coordinates are summed with :func:`math.fsum`, so the result does not
    depend on the order of ``features``.
    """
    if len(features) == 0:
        raise ValueError("merge_features needs at least one feature vector")
    stack = np.stack([np.asarray(f, dtype=np.float64) for f in features])
    if stack.ndim != 2:
        raise ValueError("feature vectors must be 1-D with equal length")
    n = stack.shape[0]
    merged = np.array([math.fsum(col) for col in stack.T]) / n
    if not renormalize:
        return merged
    norm = np.linalg.norm(merged)
    if not norm > 1e-12:
        raise DegenerateFeatureError("merged feature vector has zero norm")
    return merged / norm


# ---------------------------------------------------------------------------
# datasets


@dataclass
class IdentityRecord:
    """One synthetic identity.

    ``hr`` is the gallery image; ``lr_set[0]`` is the LR probe and
    ``lr_set[1:]`` feed the merged feature. ``probe_hr`` is the clean source of
    the probe, used only for PSNR.
    """

    id: int
    latent: np.ndarray
    hr: np.ndarray
    lr_set: list[np.ndarray]
    probe_hr: np.ndarray | None = None

    @property
    def probe(self) -> np.ndarray:
        return self.lr_set[0]

    @property
    def feature_images(self) -> list[np.ndarray]:
        return self.lr_set[1:]


@dataclass
class Dataset:
    records: list[IdentityRecord]
    seed: int
    scale: int
    size: int = IMAGE_SIZE
    extractor_seed: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def gallery(self) -> np.ndarray:
        return np.stack([r.hr for r in self.records])

    @property
    def probes(self) -> np.ndarray:
        return np.stack([r.probe for r in self.records])

    @property
    def probe_hr(self) -> np.ndarray:
        return np.stack([r.probe_hr for r in self.records])


def make_identity(identity: int, n_images: int, seed: int, scale: int = 4, size: int = IMAGE_SIZE) -> IdentityRecord:
    if n_images < 3:
        raise ValueError(f"need at least 3 images per identity (gallery, probe, feature), got {n_images}")
    rng = RngStream(seed, identity)
    latent = rng.generator.uniform(0.0, 1.0, LATENT_DIM)
    renders = [render(latent, NuisanceParams.draw(rng), rng, size) for _ in range(n_images)]
    order = rng.generator.permutation(n_images)
    gallery, probe_src = renders[order[0]], renders[order[1]]
    lr_set = [degrade(probe_src, scale)] + [degrade(renders[i], scale) for i in order[2:]]
    return IdentityRecord(identity, latent, gallery, lr_set, probe_src)


def build_dataset(n_identities: int, n_images_per_identity: int, seed: int, scale: int = 4,
                  size: int = IMAGE_SIZE, extractor_seed: int = 0) -> Dataset:
    """Evaluation split: per identity one HR gallery image, one LR probe and ``n-2`` LR feature images."""
    if n_identities < 1:
        raise ValueError("n_identities must be positive")
    if n_images_per_identity < 3:
        raise ValueError(f"need at least 3 images per identity, got {n_images_per_identity}")
    records = [make_identity(i, n_images_per_identity, seed, scale, size) for i in range(n_identities)]
    return Dataset(records, seed, scale, size, extractor_seed)


# ---------------------------------------------------------------------------
# image I/O (8-bit binary PGM)


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM images are 2-D")
    q = np.clip(np.rint(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    pixels = np.frombuffer(data[pos + 1 : pos + 1 + w * h], dtype=np.uint8)
    if pixels.size != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w).astype(np.float64) / maxval


def save_dataset(ds: Dataset, root) -> None:
    """Write ``identities.csv``, ``split.csv``, PGM images and TNSR feature files under ``root``."""
    from .numerics import write_tensor

    root = Path(root)
    for sub in ("gallery", "probe", "probe_hr", "feature_images", "features"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    with open(root / "identities.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + [f"latent{k}" for k in range(LATENT_DIM)])
        for r in ds.records:
            w.writerow([r.id] + [repr(float(v)) for v in r.latent])
    with open(root / "split.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "role", "path"])
        for r in ds.records:
            name = f"{r.id:05d}"
            write_pgm(root / "gallery" / f"{name}.pgm", r.hr)
            write_pgm(root / "probe" / f"{name}.pgm", r.probe)
            write_pgm(root / "probe_hr" / f"{name}.pgm", r.probe_hr)
            w.writerow([r.id, "gallery", f"gallery/{name}.pgm"])
            w.writerow([r.id, "probe", f"probe/{name}.pgm"])
            for k, img in enumerate(r.feature_images):
                rel = f"feature_images/{name}_{k}.pgm"
                write_pgm(root / rel, img)
                w.writerow([r.id, "feature", rel])
                feat = extract_features(img, ds.extractor_seed)
                write_tensor(root / "features" / f"{name}_{k}.tnsr", feat)


def load_dataset(root, scale: int = 4, extractor_seed: int = 0, seed: int = 0) -> Dataset:
    """Read a dataset directory written by :func:`save_dataset` (images come back 8-bit quantized)."""
    root = Path(root)
    latents: dict[int, np.ndarray] = {}
    with open(root / "identities.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            latents[int(row["id"])] = np.array([float(row[f"latent{k}"]) for k in range(LATENT_DIM)])
    roles: dict[int, dict[str, list[str]]] = {i: {"gallery": [], "probe": [], "feature": []} for i in latents}
    with open(root / "split.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            roles[int(row["id"])][row["role"]].append(row["path"])
    records = []
    for i, lat in latents.items():
        r = roles[i]
        if len(r["gallery"]) != 1 or len(r["probe"]) != 1:
            raise ValueError(f"identity {i}: expected exactly one gallery and one probe image")
        probe_hr_path = root / "probe_hr" / Path(r["probe"][0]).name
        records.append(
            IdentityRecord(
                i,
                lat,
                read_pgm(root / r["gallery"][0]),
                [read_pgm(root / p) for p in r["probe"] + r["feature"]],
                read_pgm(probe_hr_path) if probe_hr_path.exists() else None,
            )
        )
    size = records[0].hr.shape[0] if records else IMAGE_SIZE
    return Dataset(records, seed, scale, size, extractor_seed)
