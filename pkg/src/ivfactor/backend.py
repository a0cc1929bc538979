"""PLDA back-end: mean normalization, LDA, length normalization and a
two-covariance PLDA model scored by its same/different-speaker
log-likelihood ratio.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import eigh

logger = logging.getLogger(__name__)


def _group(labels) -> tuple[np.ndarray, list]:
    """Integer class index per sample, classes in order of first appearance."""
    index: dict = {}
    out = np.empty(len(labels), dtype=np.int64)
    for i, lab in enumerate(labels):
        out[i] = index.setdefault(lab, len(index))
    return out, list(index)


def _sign_fix_columns(A: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(A), axis=0)
    signs = np.sign(A[idx, np.arange(A.shape[1])])
    signs[signs == 0] = 1.0
    return A * signs


def scatter_matrices(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Between- and within-class scatter (per sample) of already centred data."""
    K = y.max() + 1
    D = X.shape[1]
    counts = np.bincount(y, minlength=K).astype(float)
    means = np.zeros((K, D))
    np.add.at(means, y, X)
    means /= counts[:, None]
    resid = X - means[y]
    Sw = resid.T @ resid / len(X)
    Sb = (means * counts[:, None]).T @ means / len(X)
    return Sb, Sw


@dataclass
class PreprocessChain:
    mean: np.ndarray        # (D,)
    lda: np.ndarray         # (D, D_lda)
    length_norm: bool = True

    @property
    def dim(self) -> int:
        return self.lda.shape[1]

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return self.apply(X)

    def apply(self, X: np.ndarray) -> np.ndarray:
        Y = (np.atleast_2d(X) - self.mean) @ self.lda
        return length_normalize(Y) if self.length_norm else Y


def fit_preprocess(X: np.ndarray, labels: Sequence, D_lda: int, length_norm: bool = True) -> PreprocessChain:
    X = np.asarray(X, dtype=np.float64)
    y, classes = _group(labels)
    K, D = len(classes), X.shape[1]
    if K < 2:
        raise ValueError("LDA needs at least two classes")
    if not 1 <= D_lda <= min(D, K - 1):
        raise ValueError(f"D_lda must lie in [1, min(D, K-1)] = [1, {min(D, K - 1)}]")
    mean = X.mean(axis=0)
    Sb, Sw = scatter_matrices(X - mean, y)
    try:
        np.linalg.cholesky(Sw)
    except np.linalg.LinAlgError:
        warnings.warn("singular within-class scatter; adding a ridge", RuntimeWarning)
        Sw = Sw + 1e-6 * np.trace(Sw) / D * np.eye(D)
    evals, evecs = eigh(Sb, Sw)
    order = np.argsort(-evals, kind="stable")[:D_lda]
    return PreprocessChain(mean, _sign_fix_columns(evecs[:, order]), length_norm)


def length_normalize(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot length-normalize a zero vector")
    return X / norms


@dataclass
class PldaModel:
    mean: np.ndarray
    between: np.ndarray   # Sigma_b
    within: np.ndarray    # Sigma_w
    transform: np.ndarray = None  # V with V' Sw V = I, V' Sb V = diag(psi)
    psi: np.ndarray = None

    def __post_init__(self):
        if self.transform is None:
            psi, V = eigh(self.between, self.within)
            self.psi = np.clip(psi, 0.0, None)
            self.transform = V

    @property
    def dim(self) -> int:
        return len(self.mean)

    def project(self, X: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(X) - self.mean) @ self.transform


def _speaker_sums(X: np.ndarray, y: np.ndarray):
    K = y.max() + 1
    counts = np.bincount(y, minlength=K).astype(float)
    sums = np.zeros((K, X.shape[1]))
    np.add.at(sums, y, X)
    return counts, sums


def plda_loglik(X: np.ndarray, labels, mean, between, within) -> float:
    """Exact marginal log-likelihood of labelled data under the two-covariance model."""
    y, _ = _group(labels)
    Xc = np.asarray(X) - mean
    d = Xc.shape[1]
    counts, sums = _speaker_sums(Xc, y)
    w_inv = np.linalg.inv(within)
    _, logdet_w = np.linalg.slogdet(within)
    total = 0.0
    for k, n in enumerate(counts):
        xbar = sums[k] / n
        dev = Xc[y == k] - xbar
        cov = between + within / n
        _, logdet_c = np.linalg.slogdet(cov)
        total += -0.5 * (n * d * np.log(2 * np.pi) + (n - 1) * logdet_w + logdet_c + d * np.log(n)
                         + np.einsum("ij,jk,ik->", dev, w_inv, dev) + xbar @ np.linalg.solve(cov, xbar))
    return float(total)


def fit_plda(X: np.ndarray, labels, n_iter: int = 20, history: Optional[list] = None) -> PldaModel:
    """EM for the two-covariance model x = mu + y_spk + e, y ~ N(0, Sb), e ~ N(0, Sw)."""
    X = np.asarray(X, dtype=np.float64)
    y, classes = _group(labels)
    if len(classes) < 2:
        raise ValueError("PLDA needs at least two speakers")
    counts, _ = _speaker_sums(X, y)
    if np.all(counts < 2):
        raise ValueError("within-class covariance unidentifiable: every speaker has a single utterance")
    mean = X.mean(axis=0)
    Xc = X - mean
    Sb, Sw = scatter_matrices(Xc, y)
    D = X.shape[1]
    Sw = Sw + 1e-10 * np.trace(Sw) / D * np.eye(D)
    _, sums = _speaker_sums(Xc, y)
    N = len(X)
    for _ in range(n_iter):
        if history is not None:
            history.append(plda_loglik(X, labels, mean, Sb, Sw))
        # posterior of each speaker variable, per distinct utterance count
        Sw_inv = np.linalg.inv(Sw)
        Sb_inv = np.linalg.pinv(Sb)
        ys = np.empty((len(counts), D))
        new_b = np.zeros((D, D))
        new_w = np.zeros((D, D))
        for n_k in np.unique(counts):
            ks = np.flatnonzero(counts == n_k)
            prec = Sb_inv + n_k * Sw_inv
            cov = np.linalg.inv(prec)
            cov = 0.5 * (cov + cov.T)
            ys[ks] = sums[ks] @ Sw_inv @ cov
            new_b += len(ks) * cov
            new_w += len(ks) * n_k * cov
        new_b += ys.T @ ys
        resid = Xc - ys[y]
        new_w += resid.T @ resid
        Sb = new_b / len(counts)
        Sw = new_w / N
        Sb, Sw = 0.5 * (Sb + Sb.T), 0.5 * (Sw + Sw.T)
    if history is not None:
        history.append(plda_loglik(X, labels, mean, Sb, Sw))
    return PldaModel(mean, Sb, Sw)


def score_matrix(model: PldaModel, enroll: np.ndarray, test: np.ndarray) -> np.ndarray:
    """LLR log p(e, t | same) - log p(e, t | different) for every pair."""
    E, T = np.atleast_2d(enroll), np.atleast_2d(test)
    for arr in (E, T):
        if arr.shape[1] != model.dim:
            raise ValueError(f"vector dimension {arr.shape[1]} does not match model dimension {model.dim}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite vector")
    u, v = model.project(E), model.project(T)
    psi = model.psi
    a = 1.0 + psi
    c = 1.0 + 2.0 * psi
    const = np.sum(np.log(a) - 0.5 * np.log(c))
    quad_coef = 0.5 * (1.0 / a - a / c)       # applied to u^2 and v^2
    cross_coef = psi / c                       # applied to u * v
    qu = (u ** 2) @ quad_coef
    qv = (v ** 2) @ quad_coef
    return const + qu[:, None] + qv[None, :] + (u * cross_coef) @ v.T


def score(model: PldaModel, enroll: np.ndarray, test: np.ndarray) -> float:
    e, t = np.asarray(enroll, dtype=float), np.asarray(test, dtype=float)
    return float(score_matrix(model, e[None], t[None])[0, 0])


@dataclass
class Backend:
    """Fitted preprocessing chain plus PLDA, applied in that order."""
    chain: PreprocessChain
    plda: PldaModel

    def transform(self, X: np.ndarray) -> np.ndarray:
        return self.chain.apply(X)

    def enroll(self, X: np.ndarray) -> np.ndarray:
        """Multi-session model: average of length-normalized vectors, renormalized."""
        Y = self.transform(X).mean(axis=0)
        return length_normalize(Y) if self.chain.length_norm else Y


def fit_backend(X: np.ndarray, labels, D_lda: int, length_norm: bool = True, n_iter: int = 20) -> Backend:
    chain = fit_preprocess(X, labels, D_lda, length_norm)
    return Backend(chain, fit_plda(chain.apply(X), labels, n_iter))
