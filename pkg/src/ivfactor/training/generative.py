"""Generative (EM) training of the total-variability extractor.

Works entirely on normalized statistics, so the model is
fbar | phi ~ N(N_c Tbar_c phi, N_c I) per component with phi ~ N(0, I).
"""
from __future__ import annotations

import logging
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from ..extractor import FullExtractor, cholesky_with_jitter, linear_terms, precision_matrices
from ..gmm import GmmUbm, SuffStats

logger = logging.getLogger(__name__)


def random_extractor(C: int, F: int, D: int, seed: int = 0, scale: float = 0.1) -> FullExtractor:
    rng = np.random.default_rng(seed)
    return FullExtractor(scale * rng.standard_normal((C, F, D)))


def marginal_loglik(t_norm: np.ndarray, n: np.ndarray, f_norm: np.ndarray) -> float:
    """sum_u [ b_u' L_u^-1 b_u / 2 - log|L_u| / 2 ], the T-dependent part of log p(stats)."""
    grams = np.einsum("cfd,cfe->cde", t_norm, t_norm)
    L = precision_matrices(grams, n)
    b = linear_terms(t_norm, f_norm)
    total = 0.0
    for u in range(len(b)):
        fac = cholesky_with_jitter(L[u])
        total += 0.5 * b[u] @ cho_solve(fac, b[u]) - np.log(np.diag(fac[0])).sum()
    return float(total)


def em_step(t_norm: np.ndarray, n: np.ndarray, f_norm: np.ndarray) -> np.ndarray:
    C, F, D = t_norm.shape
    grams = np.einsum("cfd,cfe->cde", t_norm, t_norm)
    L = precision_matrices(grams, n)
    b = linear_terms(t_norm, f_norm)
    eye = np.eye(D)
    phi = np.empty_like(b)
    second = np.empty((len(b), D, D))
    for u in range(len(b)):
        fac = cholesky_with_jitter(L[u])
        phi[u] = cho_solve(fac, b[u])
        second[u] = cho_solve(fac, eye) + np.outer(phi[u], phi[u])
    A = np.einsum("uc,ude->cde", n, second)
    Cacc = np.einsum("ucf,ud->cfd", f_norm, phi)
    new = np.empty_like(t_norm)
    for c in range(C):
        try:
            fac = cho_factor(A[c], lower=True)
        except LinAlgError:
            fac = cho_factor(A[c] + 1e-8 * np.trace(A[c]) / D * eye, lower=True)
        new[c] = cho_solve(fac, Cacc[c].T).T
    return new


def train_generative(ubm: Optional[GmmUbm], stats: Sequence[SuffStats], D: int, iterations: int = 10,
                     seed: int = 0, init: Optional[FullExtractor] = None, init_scale: float = 0.1,
                     history: Optional[list] = None) -> FullExtractor:
    """EM estimate of the normalized total-variability blocks.

    ``history`` receives the marginal log-likelihood before every
    iteration and after the last one.
    """
    if not stats:
        raise ValueError("no statistics to train on")
    n = np.stack([s.n for s in stats])
    f_norm = np.stack([s.f_norm for s in stats])
    C, F = f_norm.shape[1:]
    if ubm is not None and (ubm.n_components, ubm.dim) != (C, F):
        raise ValueError("statistics do not match the UBM dimensions")
    if D > C * F:
        logger.warning("D=%d exceeds the supervector dimension %d", D, C * F)
    t = (init or random_extractor(C, F, D, seed, init_scale)).t_norm.copy()
    for it in range(iterations):
        if history is not None:
            history.append(marginal_loglik(t, n, f_norm))
        t = em_step(t, n, f_norm)
        logger.debug("TV EM iteration %d done", it)
    if history is not None:
        history.append(marginal_loglik(t, n, f_norm))
    return FullExtractor(t)
