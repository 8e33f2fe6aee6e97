"""Identity-preservation metrics: cosine similarity, verification AUC, CMC Rank-k and PSNR."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import synthdata


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"feature shapes differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity of a zero vector")
    return float(min(1.0, max(-1.0, float(a @ b) / (na * nb))))


def cosine_matrix(probes: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """All-pairs cosine similarity, rows = probes, columns = gallery."""
    P = np.asarray(probes, dtype=np.float64)
    G = np.asarray(gallery, dtype=np.float64)
    pn = np.linalg.norm(P, axis=1, keepdims=True)
    gn = np.linalg.norm(G, axis=1, keepdims=True)
    if np.any(pn == 0) or np.any(gn == 0):
        raise ValueError("cosine similarity of a zero vector")
    return np.clip((P / pn) @ (G / gn).T, -1.0, 1.0)


def verification_auc(genuine: Sequence[float], impostor: Sequence[float]) -> float:
    """Mann-Whitney AUC: P(genuine > impostor) with ties counted one half.

    Computed from midranks of the pooled scores in O(n log n).
    """
    g = np.asarray(genuine, dtype=np.float64).ravel()
    i = np.asarray(impostor, dtype=np.float64).ravel()
    if g.size == 0 or i.size == 0:
        raise ValueError("verification_auc needs non-empty genuine and impostor lists")
    pooled = np.concatenate([g, i])
    order = np.argsort(pooled, kind="mergesort")
    sorted_vals = pooled[order]
    # midrank of each tie group (1-based ranks)
    starts = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1]])
    ends = np.r_[starts[1:], sorted_vals.size]
    mid = (starts + ends + 1) / 2.0
    ranks = np.empty_like(pooled)
    ranks[order] = np.repeat(mid, ends - starts)
    # rank sums are half-integers, so this is exact for any practical size
    u = ranks[: g.size].sum() - g.size * (g.size + 1) / 2.0
    return float(u / (g.size * i.size))


@dataclass
class SimilarityMatrix:
    """Probe-by-gallery cosine similarities with the true-match column of each probe."""

    values: np.ndarray
    true_match: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.true_match = np.asarray(self.true_match, dtype=np.int64)
        if self.values.ndim != 2:
            raise ValueError("similarity matrix must be 2-D")
        if self.true_match.shape != (self.values.shape[0],):
            raise ValueError("need exactly one true-match column per probe row")
        if np.any(self.true_match < 0) or np.any(self.true_match >= self.values.shape[1]):
            raise ValueError("true-match column out of range")
        if np.any(self.values < -1.0) or np.any(self.values > 1.0) or np.any(np.isnan(self.values)):
            raise ValueError("similarities must lie in [-1, 1]")

    @property
    def gallery_size(self) -> int:
        return self.values.shape[1]

    def genuine(self) -> np.ndarray:
        return self.values[np.arange(self.values.shape[0]), self.true_match]

    def impostor(self) -> np.ndarray:
        mask = np.ones(self.values.shape, dtype=bool)
        mask[np.arange(self.values.shape[0]), self.true_match] = False
        return self.values[mask]


def match_ranks(sim: SimilarityMatrix) -> np.ndarray:
    """0-based rank of the true match per probe; ties go to the lower column index."""
    v = sim.values
    rows = np.arange(v.shape[0])
    s = v[rows, sim.true_match][:, None]
    cols = np.arange(v.shape[1])[None, :]
    ahead = (v > s) | ((v == s) & (cols < sim.true_match[:, None]))
    return ahead.sum(axis=1)


def cmc_rank_k(sim: SimilarityMatrix, k: int) -> float:
    if not 1 <= k <= sim.gallery_size:
        raise ValueError(f"k must lie in [1, {sim.gallery_size}], got {k}")
    return float(np.mean(match_ranks(sim) < k))


def cmc_curve(sim: SimilarityMatrix) -> np.ndarray:
    """Rank-k accuracy for k = 1..gallery_size."""
    r = match_ranks(sim)
    return np.array([np.mean(r < k) for k in range(1, sim.gallery_size + 1)])


def psnr(reference, candidate, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` when the images are identical."""
    a = np.asarray(reference, dtype=np.float64)
    b = np.asarray(candidate, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if not peak > 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


REPORT_COLUMNS = ("AUC", "Rank-1", "Rank-5", "Rank-10", "PSNR")


def report_from_features(probe_feats, gallery_feats, labels_probe, labels_gallery):
    lp = np.asarray(labels_probe)
    lg = list(labels_gallery)
    if len(set(lg)) != len(lg):
        raise ValueError("gallery labels must be unique")
    pos = {lab: j for j, lab in enumerate(lg)}
    try:
        true_match = np.array([pos[lab] for lab in lp])
    except KeyError as e:
        raise ValueError(f"probe label {e.args[0]!r} has no gallery entry") from None
    sim = SimilarityMatrix(cosine_matrix(probe_feats, gallery_feats), true_match)
    out = {"AUC": verification_auc(sim.genuine(), sim.impostor())}
    for k in (1, 5, 10):
        out[f"Rank-{k}"] = cmc_rank_k(sim, min(k, sim.gallery_size))
    return out, sim


def evaluate_run(sr_images, gallery_images, extractor: Callable | None = None, labels_sr=None,
                 labels_gallery=None, references=None):
    """Metrics for a set of SR (or LR) probes against the HR gallery.

    ``extractor`` maps one image to a feature vector (default: the toy
    extractor). Labels default to position. PSNR is averaged against
    ``references`` when given, else against the gallery images.
    Returns ``(report, similarity_matrix)``.
    """
    extractor = extractor or synthdata.extract_features
    sr = list(sr_images)
    gal = list(gallery_images)
    labels_sr = list(range(len(sr))) if labels_sr is None else list(labels_sr)
    labels_gallery = list(range(len(gal))) if labels_gallery is None else list(labels_gallery)
    if len(labels_sr) != len(sr) or len(labels_gallery) != len(gal):
        raise ValueError("label count does not match image count")
    pf = np.stack([extractor(im) for im in sr])
    gf = np.stack([extractor(im) for im in gal])
    report, sim = report_from_features(pf, gf, labels_sr, labels_gallery)
    if references is None:
        pos = {lab: j for j, lab in enumerate(labels_gallery)}
        refs = [gal[pos[lab]] for lab in labels_sr]
    else:
        refs = list(references)
    report["PSNR"] = float(np.mean([psnr(r, s) for r, s in zip(refs, sr)]))
    return report, sim
