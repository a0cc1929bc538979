import numpy as np
import pytest
from scipy.stats import multivariate_normal

from ivfactor.backend import (PldaModel, fit_backend, fit_plda, fit_preprocess, length_normalize, plda_loglik,
                              score, score_matrix)
from ivfactor.metrics import compute_eer


def random_spd(rng, d, scale=1.0):
    A = rng.standard_normal((d, d))
    return scale * (A @ A.T / d + 0.3 * np.eye(d))


def plda_data(rng, n_spk, per_spk, B, W, mean=None):
    d = len(B)
    mean = np.zeros(d) if mean is None else mean
    spk = rng.multivariate_normal(np.zeros(d), B, size=n_spk)
    X = np.repeat(spk, per_spk, axis=0) + rng.multivariate_normal(np.zeros(d), W, size=n_spk * per_spk)
    return X + mean, np.repeat(np.arange(n_spk), per_spk)


def test_length_normalize_examples():
    np.testing.assert_allclose(length_normalize(np.array([3.0, 4.0])), [0.6, 0.8])
    X = np.random.default_rng(0).standard_normal((10, 4))
    np.testing.assert_allclose(np.linalg.norm(length_normalize(X), axis=1), 1.0)
    with pytest.raises(ValueError):
        length_normalize(np.zeros((1, 3)))


def test_lda_finds_discriminant_axis(rng):
    X = rng.standard_normal((300, 3))
    y = np.repeat(np.arange(3), 100)
    X[:, 1] += 6.0 * y
    chain = fit_preprocess(X, y, 1, length_norm=False)
    v = chain.lda[:, 0] / np.linalg.norm(chain.lda[:, 0])
    assert abs(v[1]) > 0.99


def test_lda_mean_and_bounds(rng):
    X = rng.standard_normal((40, 5))
    X -= X.mean(axis=0)
    y = np.repeat(np.arange(4), 10)
    chain = fit_preprocess(X, y, 3)
    np.testing.assert_allclose(chain.mean, 0.0, atol=1e-14)
    with pytest.raises(ValueError):
        fit_preprocess(X, y, 4)  # more than K - 1
    with pytest.raises(ValueError):
        fit_preprocess(X, np.zeros(40), 1)


def test_full_rank_lda_leaves_scores_unchanged(rng):
    d = 4
    X, y = plda_data(rng, 60, 5, random_spd(rng, d), random_spd(rng, d))
    plain = fit_plda(X, y)
    be = fit_backend(X, y, D_lda=d, length_norm=False)
    E, T = rng.standard_normal((20, d)), rng.standard_normal((30, d))
    s1 = score_matrix(plain, E, T)
    s2 = score_matrix(be.plda, be.transform(E), be.transform(T))
    np.testing.assert_allclose(s1, s2, atol=1e-6 * np.abs(s1).max())


def test_plda_recovers_covariances(rng):
    d = 10
    B, W = random_spd(rng, d), random_spd(rng, d, 0.5)
    X, y = plda_data(rng, 500, 10, B, W)
    m = fit_plda(X, y, n_iter=30)
    assert np.linalg.norm(m.between - B) / np.linalg.norm(B) < 0.15
    assert np.linalg.norm(m.within - W) / np.linalg.norm(W) < 0.15


def test_plda_em_monotone(rng):
    X, y = plda_data(rng, 40, 4, random_spd(rng, 3), random_spd(rng, 3))
    hist = []
    fit_plda(X, y, n_iter=25, history=hist)
    assert np.all(np.diff(hist) >= -1e-9 * np.abs(hist[:-1]))


def test_plda_loglik_matches_stacked_gaussian(rng):
    d = 3
    B, W = random_spd(rng, d), random_spd(rng, d)
    mu = rng.standard_normal(d)
    X = rng.standard_normal((9, d))
    y = [0, 0, 0, 1, 1, 2, 2, 2, 2]
    ref = 0.0
    for k in range(3):
        Xk = X[np.array(y) == k]
        n = len(Xk)
        cov = np.kron(np.ones((n, n)), B) + np.kron(np.eye(n), W)
        ref += multivariate_normal(np.tile(mu, n), cov).logpdf(Xk.ravel())
    assert plda_loglik(X, y, mu, B, W) == pytest.approx(ref, rel=1e-10)


def test_score_matches_joint_gaussian_llr(rng):
    d = 4
    B, W = random_spd(rng, d), random_spd(rng, d)
    mu = rng.standard_normal(d)
    model = PldaModel(mu, B, W)
    tot = B + W
    same = multivariate_normal(np.tile(mu, 2), np.block([[tot, B], [B, tot]]))
    diff = multivariate_normal(np.tile(mu, 2), np.block([[tot, np.zeros((d, d))], [np.zeros((d, d)), tot]]))
    for _ in range(10):
        e, t = rng.standard_normal(d), rng.standard_normal(d)
        x = np.concatenate([e, t])
        assert score(model, e, t) == pytest.approx(same.logpdf(x) - diff.logpdf(x), rel=1e-9, abs=1e-9)


def test_score_symmetry_and_translation(rng):
    d = 3
    model = PldaModel(rng.standard_normal(d), random_spd(rng, d), random_spd(rng, d))
    E, T = rng.standard_normal((5, d)), rng.standard_normal((7, d))
    np.testing.assert_allclose(score_matrix(model, E, T), score_matrix(model, T, E).T, atol=1e-12)
    shift = rng.standard_normal(d) * 10
    moved = PldaModel(model.mean + shift, model.between, model.within)
    np.testing.assert_allclose(score_matrix(moved, E + shift, T + shift), score_matrix(model, E, T), atol=1e-9)


def test_fit_is_translation_equivariant(rng):
    X, y = plda_data(rng, 30, 4, random_spd(rng, 3), random_spd(rng, 3))
    a, b = fit_plda(X, y), fit_plda(X + 100.0, y)
    np.testing.assert_allclose(a.between, b.between, atol=1e-8)
    np.testing.assert_allclose(a.within, b.within, atol=1e-8)


def test_vanishing_between_gives_zero_scores(rng):
    model = PldaModel(np.zeros(3), 1e-12 * np.eye(3), random_spd(rng, 3))
    assert np.abs(score_matrix(model, rng.standard_normal((4, 3)), rng.standard_normal((4, 3)))).max() < 1e-9


def test_identical_vectors_score_positive(rng):
    model = PldaModel(np.zeros(3), random_spd(rng, 3), random_spd(rng, 3))
    for x in rng.standard_normal((20, 3)):
        assert score(model, x, x) > 0


def test_no_speaker_variance_is_chance(rng):
    X = rng.standard_normal((400, 4))
    y = np.repeat(np.arange(100), 4)
    be = fit_backend(X, y, D_lda=3)
    E = be.transform(X[::4])
    T = be.transform(X[1::4])
    S = score_matrix(be.plda, E, T)
    tgt = np.eye(100, dtype=bool)
    assert abs(compute_eer((S[tgt], S[~tgt])).eer - 50.0) < 10.0


def test_singleton_speakers_rejected(rng):
    with pytest.raises(ValueError, match="single utterance"):
        fit_plda(rng.standard_normal((5, 2)), np.arange(5))
    with pytest.raises(ValueError):
        fit_plda(rng.standard_normal((5, 2)), np.zeros(5))


def test_score_dimension_check(rng):
    model = PldaModel(np.zeros(3), np.eye(3), np.eye(3))
    with pytest.raises(ValueError):
        score_matrix(model, np.zeros((1, 2)), np.zeros((1, 3)))


def test_backend_scores_translation_invariant(rng):
    X, y = plda_data(rng, 40, 5, random_spd(rng, 6), random_spd(rng, 6))
    shift = 50.0 * rng.standard_normal(6)
    a, b = fit_backend(X, y, D_lda=4), fit_backend(X + shift, y, D_lda=4)
    E, T = X[:10], X[10:30]
    s1 = score_matrix(a.plda, a.transform(E), a.transform(T))
    s2 = score_matrix(b.plda, b.transform(E + shift), b.transform(T + shift))
    assert np.abs(s1 - s2).max() < 1e-8


def test_backend_deterministic_and_length_norm_idempotent(rng):
    X, y = plda_data(rng, 20, 4, random_spd(rng, 5), random_spd(rng, 5))
    a, b = fit_backend(X, y, D_lda=3), fit_backend(X, y, D_lda=3)
    assert np.array_equal(a.chain.lda, b.chain.lda) and np.array_equal(a.plda.between, b.plda.between)
    Y = a.transform(X)
    np.testing.assert_allclose(length_normalize(length_normalize(Y)), length_normalize(Y), rtol=0, atol=1e-15)


def test_multi_session_enrollment(rng):
    X, y = plda_data(rng, 20, 4, random_spd(rng, 5), random_spd(rng, 5))
    be = fit_backend(X, y, D_lda=3)
    np.testing.assert_allclose(be.enroll(X[:1]), be.transform(X[:1])[0], atol=1e-15)
    m = be.enroll(X[:3])
    assert np.linalg.norm(m) == pytest.approx(1.0)
    np.testing.assert_allclose(m, length_normalize(be.transform(X[:3]).mean(axis=0)))
