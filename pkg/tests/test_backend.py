import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal
from sklearn.base import clone

from svkit.backend import (
    LDA,
    PLDA,
    BackendWarning,
    LengthNormalizer,
    PldaBackend,
    PldaModel,
    ensemble_concat,
    fit_lda,
    fit_plda,
    length_normalize,
    plda_llr,
    scatter_matrices,
)
from svkit.exceptions import CountError, DimensionError, StateError


def random_model(rng, dim, zero_psi=False):
    Q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    A = Q * rng.uniform(0.5, 2.0, dim)  # condition number at most 4
    psi = np.zeros(dim) if zero_psi else np.sort(rng.uniform(0.05, 8.0, dim))[::-1]
    return PldaModel(rng.normal(size=dim), np.linalg.inv(A).T, psi)


def brute_force_llr(model, u1, u2):
    """Joint Gaussian likelihood ratio in the original embedding space."""
    A = model.A
    phi_w = A @ A.T
    phi_b = A @ np.diag(model.psi) @ A.T
    tot = phi_b + phi_w
    joint = np.block([[tot, phi_b], [phi_b, tot]])
    m = model.mean
    same = multivariate_normal(np.concatenate([m, m]), joint).logpdf(np.concatenate([u1, u2]))
    diff = multivariate_normal(m, tot).logpdf(u1) + multivariate_normal(m, tot).logpdf(u2)
    return same - diff


def sample_plda(rng, n_classes, per_class, psi, A, mean):
    dim = len(psi)
    latent_spk = rng.normal(size=(n_classes, dim)) * np.sqrt(psi)
    z = np.repeat(latent_spk, per_class, axis=0) + rng.normal(size=(n_classes * per_class, dim))
    return mean + z @ A.T, np.repeat(np.arange(n_classes), per_class)


# -------------------------------------------------------------- scoring

@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 5))
def test_llr_matches_brute_force_gaussian(seed, dim):
    rng = np.random.default_rng(seed)
    model = random_model(rng, dim)
    u1, u2 = rng.normal(size=(2, dim)) * 2
    assert plda_llr(model, u1, u2) == pytest.approx(brute_force_llr(model, u1, u2), abs=1e-8)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_llr_symmetric_and_zero_without_speaker_variance(seed):
    rng = np.random.default_rng(seed)
    model = random_model(rng, 4)
    u1, u2 = rng.normal(size=(2, 4)) * 3
    assert plda_llr(model, u1, u2) == plda_llr(model, u2, u1)
    flat = random_model(rng, 4, zero_psi=True)
    assert plda_llr(flat, u1, u2) == 0.0


def test_llr_batched_rows_match_single_pairs(rng):
    model = random_model(rng, 3)
    U1, U2 = rng.normal(size=(2, 7, 3))
    batched = plda_llr(model, U1, U2)
    assert batched.shape == (7,)
    np.testing.assert_allclose(batched, [plda_llr(model, a, b) for a, b in zip(U1, U2)], rtol=0, atol=1e-12)
    with pytest.raises(DimensionError):
        plda_llr(model, U1, U2[:3])


def test_single_active_dimension_depends_only_on_it(rng):
    model = random_model(rng, 4)
    model.psi = np.array([3.0, 0.0, 0.0, 0.0])
    u1, u2 = rng.normal(size=(2, 4))
    x1, x2 = model.latent(u1)[0], model.latent(u2)[0]
    base = plda_llr(model, u1, u2)
    for _ in range(5):
        y1, y2 = x1.copy(), x2.copy()
        y1[1:], y2[1:] = rng.normal(size=(2, 3)) * 5
        v1, v2 = model.mean + model.A @ y1, model.mean + model.A @ y2
        assert plda_llr(model, v1, v2) == pytest.approx(base, abs=1e-9)


# -------------------------------------------------------------- fitting

def test_fit_recovers_psi_and_whitens(rng):
    psi = np.array([5.0, 1.0, 0.2])
    A = rng.normal(size=(3, 3)) + 2 * np.eye(3)
    X, y = sample_plda(rng, 500, 20, psi, A, rng.normal(size=3))
    model = fit_plda(X, y)
    np.testing.assert_allclose(model.psi, psi, rtol=0.1)
    Z = model.latent(X)
    means = np.stack([Z[y == c].mean(axis=0) for c in range(500)])
    within = Z - means[y]
    np.testing.assert_allclose(within.T @ within / (len(Z) - 500), np.eye(3), atol=1e-9)


def test_fit_is_affine_invariant(rng):
    X, y = sample_plda(rng, 40, 5, np.array([4.0, 1.0, 0.5]), np.eye(3), np.zeros(3))
    B = rng.normal(size=(3, 3)) + 3 * np.eye(3)
    c = rng.normal(size=3)
    m1, m2 = fit_plda(X, y), fit_plda(X @ B.T + c, y)
    U1, U2 = rng.normal(size=(2, 10, 3))
    np.testing.assert_allclose(plda_llr(m1, U1, U2), plda_llr(m2, U1 @ B.T + c, U2 @ B.T + c), atol=1e-8)


def test_negative_between_class_is_clamped(rng):
    X = rng.normal(size=(60, 3))
    y = np.repeat(np.arange(6), 10)
    for c in range(6):  # identical class means
        X[y == c] -= X[y == c].mean(axis=0)
    with pytest.warns(BackendWarning, match="clamped"):
        model = fit_plda(X, y)
    assert np.all(model.psi == 0.0)


def test_singletons_skip_within_class_estimate(rng):
    X, y = sample_plda(rng, 10, 4, np.array([2.0, 1.0]), np.eye(2), np.zeros(2))
    X = np.vstack([X, rng.normal(size=(3, 2)) * 100])
    y = np.concatenate([y, [100, 101, 102]])
    model = fit_plda(X, y)
    Z = model.latent(X[:40])
    within = Z - np.stack([Z[y[:40] == c].mean(axis=0) for c in range(10)])[y[:40]]
    np.testing.assert_allclose(within.T @ within / 30, np.eye(2), atol=1e-9)
    with pytest.raises(CountError):
        fit_plda(rng.normal(size=(4, 2)), [0, 0, 1, 2])


# ------------------------------------------------------------------ LDA

def test_lda_eigenvalues_are_rayleigh_quotients(rng):
    X, y = sample_plda(rng, 12, 6, np.array([6.0, 3.0, 1.0, 0.0, 0.0]), rng.normal(size=(5, 5)) + 2 * np.eye(5),
                       np.zeros(5))
    lda = fit_lda(X, y, 4)
    Sw, Sb = scatter_matrices(X, y)
    for v, lam in zip(lda.projection.T, lda.eigenvalues):
        assert (v @ Sb @ v) / (v @ Sw @ v) == pytest.approx(lam, rel=1e-9)
    assert np.all(np.diff(lda.eigenvalues) <= 0)
    P = lda.projection
    np.testing.assert_allclose(P.T @ Sw @ P, np.eye(4), atol=1e-9)


def test_lda_dim_is_clipped(rng):
    X, y = sample_plda(rng, 5, 4, np.ones(6), np.eye(6), np.zeros(6))
    with pytest.warns(BackendWarning, match="clipped to 4"):
        lda = fit_lda(X, y, 200)
    assert lda.projection.shape == (6, 4)


def test_lda_with_zero_block_regularizes(rng):
    X, y = sample_plda(rng, 8, 5, np.array([4.0, 2.0, 1.0]), np.eye(3), np.zeros(3))
    X = np.hstack([X, np.zeros((len(X), 2))])
    with pytest.warns(BackendWarning, match="singular"):
        lda = fit_lda(X, y, 3)
    assert np.all(np.isfinite(lda.projection))
    assert np.all(np.isfinite(lda.apply(X)))
    # the zero block carries no class information
    full = fit_lda(X[:, :3], y, 3)
    np.testing.assert_allclose(lda.eigenvalues, full.eigenvalues, rtol=1e-4)


def test_lda_count_errors(rng):
    with pytest.raises(CountError):
        fit_lda(rng.normal(size=(4, 2)), [0, 0, 0, 0], 1)
    with pytest.raises(CountError):
        fit_lda(rng.normal(size=(4, 2)), [0, 0, 1, 2], 1)


# ------------------------------------------------------------ estimators

def test_length_normalize_leaves_zero_rows():
    out = length_normalize(np.array([[3.0, 4.0], [0.0, 0.0]]))
    np.testing.assert_array_equal(out, [[0.6, 0.8], [0.0, 0.0]])
    assert LengthNormalizer().fit_transform(np.array([[0.0, 2.0]])).tolist() == [[0.0, 1.0]]


def test_estimators_follow_sklearn_protocol(rng):
    X, y = sample_plda(rng, 6, 4, np.array([30.0, 20.0, 10.0]), np.eye(3), np.zeros(3))
    for est in (LDA(n_components=2), PLDA(), PldaBackend(lda_dim=2)):
        clone(est)
        with pytest.raises(StateError):
            est.transform(X)
    assert LDA(n_components=2).fit(X, y).transform(X).shape == (24, 2)
    plda = PLDA().fit(X, y)
    assert plda.score_pairs(X[:3], X[3:6]).shape == (3,)


def test_backend_round_trip_and_same_speaker_wins(rng, tmp_path):
    X, y = sample_plda(rng, 30, 6, np.array([8.0, 4.0, 2.0, 1.0]), np.eye(4), np.ones(4) * 3)
    for lda_dim in (3, None):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            backend = PldaBackend(lda_dim=lda_dim).fit(X, y)
        same = backend.score_pairs(X[0::6], X[1::6])
        diff = backend.score_pairs(X[0::6], np.roll(X[1::6], 1, axis=0))
        assert np.mean(same) > np.mean(diff)
        backend.save(tmp_path / "b.bin")
        again = PldaBackend.load(tmp_path / "b.bin")
        assert again.lda_dim == lda_dim
        np.testing.assert_array_equal(again.score_pairs(X[:5], X[5:10]), backend.score_pairs(X[:5], X[5:10]))
    emb = {f"u{i}": x for i, x in enumerate(X)}
    np.testing.assert_array_equal(backend.score_trials(emb, ["u0", "u1"], ["u2", "u9"]),
                                  backend.score_pairs(X[[0, 1]], X[[2, 9]]))
    with pytest.raises(DimensionError):
        backend.transform(X[:, :2])


def test_ensemble_concat_shapes():
    out = ensemble_concat(np.ones((3, 4)), np.zeros((3, 2)))
    assert out.shape == (3, 6)
    with pytest.raises(DimensionError):
        ensemble_concat(np.ones((3, 4)), np.zeros((2, 2)))
