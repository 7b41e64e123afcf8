"""Embedding back-end: centering, length normalization, LDA and two-covariance PLDA."""

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import CountError, DimensionError, FormatError, StateError
from .io import read_container, write_container

log = logging.getLogger(__name__)


class BackendWarning(UserWarning):
    """Numerical fix-ups applied while fitting (regularization, clamping, clipping)."""


def _as_2d(X, name="embeddings"):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None]
    if X.ndim != 2:
        raise DimensionError(f"{name} must be (n, dim), got shape {X.shape}")
    return X


def _class_stats(X, labels):
    labels = np.asarray(labels)
    if len(labels) != len(X):
        raise DimensionError(f"{len(X)} embeddings but {len(labels)} labels")
    classes, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    sums = np.zeros((len(classes), X.shape[1]))
    np.add.at(sums, inverse, X)
    return classes, inverse, counts, sums / counts[:, None]


def _regularize(S, what):
    """Return S, adding lambda*I (lambda = 1e-6 * trace/dim) when S is singular."""
    dim = S.shape[0]
    eig = linalg.eigvalsh(S)
    scale = max(eig[-1], np.finfo(float).tiny)
    if eig[0] > 1e-10 * scale:
        return S
    lam = 1e-6 * np.trace(S) / dim
    if lam <= 0:
        lam = 1e-6
    msg = f"{what} is singular (min eigenvalue {eig[0]:.3g}); adding {lam:.3g} * I"
    warnings.warn(msg, BackendWarning, stacklevel=3)
    log.warning(msg)
    return S + lam * np.eye(dim)


# ---------------------------------------------------------------------- LDA


@dataclass
class LdaTransform:
    mean: np.ndarray
    projection: np.ndarray  # (dim, lda_dim), columns by descending eigenvalue
    eigenvalues: np.ndarray

    def apply(self, X):
        X = _as_2d(X)
        if X.shape[1] != self.mean.shape[0]:
            raise DimensionError(f"LDA expects dim {self.mean.shape[0]}, got {X.shape[1]}")
        return (X - self.mean) @ self.projection


def scatter_matrices(X, labels):
    """Within- and between-class scatter, both normalized by the sample count."""
    X = _as_2d(X)
    _, inverse, counts, means = _class_stats(X, labels)
    mu = X.mean(axis=0)
    centred = X - means[inverse]
    Sw = centred.T @ centred / len(X)
    D = means - mu
    Sb = (D * counts[:, None]).T @ D / len(X)
    return Sw, Sb


def fit_lda(X, labels, lda_dim):
    """Fisher LDA by the generalized eigenproblem ``Sb v = l Sw v``.

    ``lda_dim`` larger than ``min(dim, n_classes - 1)`` is clipped with a
    warning.  Projections are scaled so the within-class scatter of the
    output is the identity.
    """
    X = _as_2d(X)
    classes, _, counts, _ = _class_stats(X, labels)
    if len(classes) < 2:
        raise CountError("LDA needs at least two classes")
    if np.any(counts < 2):
        raise CountError("LDA needs at least two samples in every class")
    limit = min(X.shape[1], len(classes) - 1)
    if lda_dim < 1:
        raise CountError(f"lda_dim must be positive, got {lda_dim}")
    if lda_dim > limit:
        msg = f"lda_dim {lda_dim} clipped to {limit} (dim {X.shape[1]}, {len(classes)} classes)"
        warnings.warn(msg, BackendWarning, stacklevel=2)
        log.warning(msg)
        lda_dim = limit
    Sw, Sb = scatter_matrices(X, labels)
    Sw = _regularize(Sw, "within-class scatter")
    vals, vecs = linalg.eigh(Sb, Sw)
    order = np.argsort(vals)[::-1][:lda_dim]
    return LdaTransform(X.mean(axis=0), vecs[:, order], vals[order])


# --------------------------------------------------------------------- PLDA


@dataclass
class PldaModel:
    """Latent-space PLDA.  ``V`` maps centred embeddings to the latent space
    (``ubar = V.T @ (u - mean)``) where the within-class covariance is the
    identity and the between-class covariance is ``diag(psi)``."""

    mean: np.ndarray
    V: np.ndarray
    psi: np.ndarray

    @property
    def dim(self):
        return self.mean.shape[0]

    @property
    def A(self):
        """Feature-space transform: ``u = mean + A @ ubar``."""
        return np.linalg.inv(self.V.T)

    def latent(self, X):
        X = _as_2d(X)
        if X.shape[1] != self.dim:
            raise DimensionError(f"PLDA expects dim {self.dim}, got {X.shape[1]}")
        return (X - self.mean) @ self.V


def plda_covariances(X, labels):
    """Pooled within-class covariance and count-corrected between-class covariance.

    Classes with a single sample do not enter the within-class estimate.
    The between-class estimate is the count-weighted covariance of class
    means minus ``phi_w / n_bar`` (``n_bar`` = mean class size), which
    removes the spread the means inherit from within-class noise.
    """
    X = _as_2d(X)
    classes, inverse, counts, means = _class_stats(X, labels)
    multi = counts >= 2
    if len(classes) < 2 or multi.sum() < 2:
        raise CountError("PLDA needs at least two classes with two or more samples")
    keep = multi[inverse]
    centred = X[keep] - means[inverse[keep]]
    phi_w = centred.T @ centred / (keep.sum() - multi.sum())
    mu = X.mean(axis=0)
    D = means - mu
    n_bar = len(X) / len(classes)
    phi_b = (D * counts[:, None]).T @ D / len(X) - phi_w / n_bar
    return mu, phi_w, phi_b


def fit_plda(X, labels):
    mu, phi_w, phi_b = plda_covariances(X, labels)
    phi_w = _regularize(phi_w, "within-class covariance")
    s, U = linalg.eigh(phi_w)
    W = U / np.sqrt(s)  # W.T @ phi_w @ W = I
    B = W.T @ phi_b @ W
    psi, Q = linalg.eigh((B + B.T) / 2)
    order = np.argsort(psi)[::-1]
    psi, Q = psi[order], Q[:, order]
    if psi[-1] < 0:
        n_neg = int(np.sum(psi < 0))
        msg = f"between-class covariance has {n_neg} negative eigenvalue(s) (min {psi[-1]:.3g}); clamped to 0"
        warnings.warn(msg, BackendWarning, stacklevel=2)
        log.warning(msg)
        psi = np.maximum(psi, 0.0)
    return PldaModel(mu, W @ Q, psi)


def llr_latent(x, y, psi):
    """Same-vs-different log-likelihood ratio for latent vectors (rows)."""
    a = psi + 1.0
    D = 2.0 * psi + 1.0
    per_dim = np.log(a) - 0.5 * np.log(D) - psi ** 2 * (x * x + y * y) / (2.0 * a * D) + psi * (x * y) / D
    return per_dim.sum(axis=-1)


def plda_llr(model, u1, u2):
    """Log-likelihood ratio for embedding pairs; ``u1``/``u2`` are vectors or row-paired matrices."""
    single = np.ndim(u1) == 1 and np.ndim(u2) == 1
    x, y = model.latent(u1), model.latent(u2)
    if x.shape != y.shape:
        raise DimensionError(f"paired inputs differ in shape: {x.shape} vs {y.shape}")
    out = llr_latent(x, y, model.psi)
    return float(out[0]) if single else out


def ensemble_concat(svec, xvec):
    """Concatenate s-vector and x-vector of the same utterances (last axis)."""
    svec, xvec = np.asarray(svec), np.asarray(xvec)
    if svec.shape[:-1] != xvec.shape[:-1]:
        raise DimensionError(f"cannot pair embeddings of shapes {svec.shape} and {xvec.shape}")
    return np.concatenate([svec, xvec], axis=-1)


# --------------------------------------------------------------- estimators


def length_normalize(X):
    X = _as_2d(X)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    return X / np.where(norms > 0, norms, 1.0)


class LengthNormalizer(TransformerMixin, BaseEstimator):
    """Scale each row to unit L2 norm (zero rows are left untouched)."""

    def fit(self, X, y=None):
        self.n_features_in_ = _as_2d(X).shape[1]
        return self

    def transform(self, X):
        return length_normalize(X)


class LDA(TransformerMixin, BaseEstimator):
    def __init__(self, n_components=200):
        self.n_components = n_components

    def fit(self, X, y):
        self.lda_ = fit_lda(X, y, self.n_components)
        self.n_components_ = self.lda_.projection.shape[1]
        return self

    def transform(self, X):
        if not hasattr(self, "lda_"):
            raise StateError("LDA is not fitted")
        return self.lda_.apply(X)


class PLDA(BaseEstimator):
    """Two-covariance PLDA.  ``transform`` maps to the latent space; scoring is pairwise."""

    def fit(self, X, y):
        self.model_ = fit_plda(X, y)
        return self

    def _check(self):
        if not hasattr(self, "model_"):
            raise StateError("PLDA is not fitted")
        return self.model_

    def transform(self, X):
        return self._check().latent(X)

    def score_pairs(self, X1, X2):
        return plda_llr(self._check(), X1, X2)


class PldaBackend(BaseEstimator):
    """center -> length-normalize -> LDA -> center -> PLDA, fitted on labelled embeddings.

    ``lda_dim=None`` (or 0) skips the LDA stage.
    """

    def __init__(self, lda_dim=200, length_norm=True):
        self.lda_dim = lda_dim
        self.length_norm = length_norm

    def fit(self, X, y):
        X = _as_2d(X)
        self.mean_ = X.mean(axis=0)
        Z = self._pre(X)
        if self.lda_dim:
            self.lda_ = fit_lda(Z, y, self.lda_dim)
            Z = self.lda_.apply(Z)
        else:
            self.lda_ = None
        self.mean2_ = Z.mean(axis=0)
        self.plda_ = fit_plda(Z - self.mean2_, y)
        return self

    def _pre(self, X):
        Z = _as_2d(X) - self.mean_
        return length_normalize(Z) if self.length_norm else Z

    def transform(self, X):
        """Embeddings mapped to the space PLDA operates on (before its own centering)."""
        if not hasattr(self, "plda_"):
            raise StateError("PldaBackend is not fitted")
        X = _as_2d(X)
        if X.shape[1] != self.mean_.shape[0]:
            raise DimensionError(f"backend expects dim {self.mean_.shape[0]}, got {X.shape[1]}")
        Z = self._pre(X)
        if self.lda_ is not None:
            Z = self.lda_.apply(Z)
        return Z - self.mean2_

    def score_pairs(self, X1, X2):
        return plda_llr(self.plda_, self.transform(X1), self.transform(X2))

    def score_trials(self, embeddings, enroll, test):
        """Scores for trial lists given a ``utterance_id -> vector`` mapping."""
        E = np.stack([embeddings[u] for u in enroll])
        T = np.stack([embeddings[u] for u in test])
        return self.score_pairs(E, T)

    def save(self, path):
        if not hasattr(self, "plda_"):
            raise StateError("PldaBackend is not fitted")
        arrays = {"mean": self.mean_, "mean2": self.mean2_, "plda.mean": self.plda_.mean,
                  "plda.V": self.plda_.V, "plda.psi": self.plda_.psi}
        if self.lda_ is not None:
            arrays.update({"lda.mean": self.lda_.mean, "lda.projection": self.lda_.projection,
                           "lda.eigenvalues": self.lda_.eigenvalues})
        header = {"kind": "plda_backend", "lda_dim": self.lda_dim or 0, "length_norm": int(bool(self.length_norm))}
        write_container(path, arrays, header)

    @classmethod
    def load(cls, path):
        header, a = read_container(path)
        if header.get("kind") != "plda_backend":
            raise FormatError(f"{path} does not hold a PLDA back-end")
        est = cls(lda_dim=int(header["lda_dim"]) or None, length_norm=header["length_norm"] == "1")
        est.mean_, est.mean2_ = a["mean"], a["mean2"]
        est.lda_ = LdaTransform(a["lda.mean"], a["lda.projection"], a["lda.eigenvalues"]) if "lda.mean" in a else None
        est.plda_ = PldaModel(a["plda.mean"], a["plda.V"], a["plda.psi"])
        return est
