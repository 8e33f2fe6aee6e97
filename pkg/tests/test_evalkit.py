import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from featsr import evalkit as ek
from oracles import brute_auc, brute_rank_k


def test_cosine_examples():
    a = np.array([0.3, -1.2, 2.0])
    assert ek.cosine_similarity(a, a) == 1.0
    assert ek.cosine_similarity([1, 0], [0, 1]) == 0.0
    assert ek.cosine_similarity([1, 0], [-1, 0]) == -1.0
    with pytest.raises(ValueError):
        ek.cosine_similarity([0, 0], [1, 0])
    with pytest.raises(ValueError):
        ek.cosine_similarity([1, 0], [1, 0, 0])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_cosine_scale_invariance(seed, c):
    g = np.random.default_rng(seed)
    a, b = g.standard_normal(8), g.standard_normal(8)
    assert math.isclose(ek.cosine_similarity(a, c * b), ek.cosine_similarity(a, b), rel_tol=1e-12, abs_tol=1e-15)
    assert -1.0 <= ek.cosine_similarity(a, b) <= 1.0


def test_cosine_matrix_matches_pairwise():
    g = np.random.default_rng(0)
    P, G = g.standard_normal((4, 6)), g.standard_normal((5, 6))
    M = ek.cosine_matrix(P, G)
    for i in range(4):
        for j in range(5):
            assert math.isclose(M[i, j], ek.cosine_similarity(P[i], G[j]), rel_tol=1e-12, abs_tol=1e-15)


def test_auc_examples():
    assert ek.verification_auc([0.9, 0.8], [0.1, 0.2]) == 1.0
    assert ek.verification_auc([0.5], [0.5]) == 0.5
    assert ek.verification_auc([0.1], [0.9]) == 0.0
    with pytest.raises(ValueError):
        ek.verification_auc([], [0.1])
    with pytest.raises(ValueError):
        ek.verification_auc([0.1], [])


def test_auc_matches_brute_force_on_random_scores():
    g = np.random.default_rng(20)
    gen, imp = g.random(20), g.random(20)
    assert ek.verification_auc(gen, imp) == brute_auc(gen, imp)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=30), st.lists(st.integers(0, 6), min_size=1, max_size=30))
def test_auc_matches_brute_force_with_ties(gen, imp):
    gen = np.array(gen) / 6.0
    imp = np.array(imp) / 6.0
    assert ek.verification_auc(gen, imp) == brute_auc(gen, imp)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_auc_invariant_under_increasing_transform(seed):
    g = np.random.default_rng(seed)
    gen, imp = g.random(15) + 0.01, g.random(25) + 0.01
    assert ek.verification_auc(gen, imp) == ek.verification_auc(gen**3, imp**3)


def test_similarity_matrix_validation():
    with pytest.raises(ValueError):
        ek.SimilarityMatrix(np.zeros((2, 2)), [0])
    with pytest.raises(ValueError):
        ek.SimilarityMatrix(np.zeros((2, 2)), [0, 2])
    with pytest.raises(ValueError):
        ek.SimilarityMatrix(np.full((2, 2), 1.5), [0, 1])
    sim = ek.SimilarityMatrix(np.array([[0.9, 0.1], [0.2, 0.8]]), [0, 1])
    assert sim.genuine().tolist() == [0.9, 0.8]
    assert sorted(sim.impostor().tolist()) == [0.1, 0.2]


def test_rank_examples():
    g = np.random.default_rng(1)
    v = g.uniform(-1, 0.5, (10, 10))
    np.fill_diagonal(v, 0.9)
    sim = ek.SimilarityMatrix(v, np.arange(10))
    assert ek.cmc_rank_k(sim, 1) == 1.0
    np.fill_diagonal(v, -1.0)
    sim = ek.SimilarityMatrix(v, np.arange(10))
    assert ek.cmc_rank_k(sim, 9) == 0.0
    assert ek.cmc_rank_k(sim, 10) == 1.0
    for k in (0, 11):
        with pytest.raises(ValueError):
            ek.cmc_rank_k(sim, k)


def test_rank_ties_broken_by_ascending_column():
    v = np.array([[0.5, 0.5, 0.5], [0.5, 0.5, 0.5]])
    sim = ek.SimilarityMatrix(v, [0, 2])
    assert ek.match_ranks(sim).tolist() == [0, 2]
    assert ek.cmc_rank_k(sim, 1) == 0.5


@pytest.mark.parametrize("seed", range(5))
def test_rank_matches_brute_force_oracle(seed):
    g = np.random.default_rng(seed)
    v = np.round(g.uniform(-1, 1, (20, 20)), 1)  # coarse values force ties
    tm = g.integers(0, 20, 20)
    sim = ek.SimilarityMatrix(v, tm)
    for k in (1, 5, 10):
        assert ek.cmc_rank_k(sim, k) == brute_rank_k(v, tm, k)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12))
def test_cmc_monotone_and_complete(seed, n):
    g = np.random.default_rng(seed)
    sim = ek.SimilarityMatrix(g.uniform(-1, 1, (n, n)), g.integers(0, n, n))
    curve = ek.cmc_curve(sim)
    assert np.all(np.diff(curve) >= 0) and curve[-1] == 1.0
    assert [ek.cmc_rank_k(sim, k) for k in range(1, n + 1)] == curve.tolist()


def test_psnr_examples():
    a = np.random.default_rng(0).random((4, 4))
    assert ek.psnr(a, a) == math.inf
    assert math.isclose(ek.psnr(np.zeros((3, 3)), np.full((3, 3), 0.5)), 6.0206, abs_tol=5e-5)
    b = np.random.default_rng(1).random((4, 4))
    assert ek.psnr(a, b) == ek.psnr(b, a)
    with pytest.raises(ValueError):
        ek.psnr(a, a[:3])
    with pytest.raises(ValueError):
        ek.psnr(a, b, peak=0.0)


def test_report_hand_built_three_identities():
    probes = np.array([[1.0, 0.0], [0.0, 1.0], [3.0, 4.0]])
    gallery = np.array([[1.0, 0.0], [3.0, 4.0], [0.0, 1.0]])
    # probe 0 -> gallery 0, probe 1 -> gallery 1, probe 2 -> gallery 2
    rep, sim = ek.report_from_features(probes, gallery, [0, 1, 2], [0, 1, 2])
    assert sim.values.tolist() == [[1.0, 0.6, 0.0], [0.0, 0.8, 1.0], [0.6, 1.0, 0.8]]
    assert ek.match_ranks(sim).tolist() == [0, 1, 1]
    assert rep["Rank-1"] == pytest.approx(1 / 3)
    assert rep["Rank-5"] == 1.0 and rep["Rank-10"] == 1.0
    # genuine {1, .8, .8}, impostor {.6, 0, 0, 1, .6, 1}: 5 + 4 + 4 of 18 pairs
    assert rep["AUC"] == pytest.approx(13 / 18, abs=1e-15)


def test_report_label_errors():
    f = np.eye(3)
    with pytest.raises(ValueError):
        ek.report_from_features(f, f, [0, 1, 5], [0, 1, 2])
    with pytest.raises(ValueError):
        ek.report_from_features(f, f, [0, 1, 2], [0, 0, 2])
    with pytest.raises(ValueError):
        ek.evaluate_run(list(np.random.default_rng(0).random((2, 32, 32))), list(np.random.default_rng(1).random((2, 32, 32))),
                        labels_sr=[0])


def test_evaluate_run_self_match():
    imgs = list(np.random.default_rng(4).random((6, 32, 32)))
    rep, sim = ek.evaluate_run(imgs, imgs)
    assert rep["AUC"] == 1.0 and rep["Rank-1"] == 1.0 and rep["PSNR"] == math.inf
    assert sim.values.shape == (6, 6)


def test_evaluate_run_constant_features():
    imgs = list(np.random.default_rng(5).random((5, 32, 32)))
    rep, _ = ek.evaluate_run(imgs, imgs[::-1], extractor=lambda im: np.array([1.0, 2.0]), labels_gallery=[4, 3, 2, 1, 0])
    assert rep["AUC"] == 0.5


def test_evaluate_run_psnr_against_references():
    g = np.random.default_rng(6)
    sr, gal = list(g.random((3, 32, 32))), list(g.random((3, 32, 32)))
    rep, _ = ek.evaluate_run(sr, gal, references=sr)
    assert rep["PSNR"] == math.inf
    rep, _ = ek.evaluate_run(sr, gal)
    assert rep["PSNR"] == pytest.approx(np.mean([ek.psnr(a, b) for a, b in zip(gal, sr)]))
