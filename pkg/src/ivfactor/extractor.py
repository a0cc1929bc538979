"""i-vector extractors in full and factorized (shared-basis) form.

Both representations hold *normalized* blocks, i.e. ``Tbar_c = S_c^(-1/2) T_c``,
so extraction only needs the normalized statistics:

    L   = I + sum_c N_c Tbar_c' Tbar_c
    phi = L^-1 sum_c Tbar_c' fbar_c

The factorized extractor writes every block as ``Tbar_c = sum_q a[c, q] U_q``
with ``Q`` basis matrices shared by all components.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .gmm import SuffStats

logger = logging.getLogger(__name__)


class IllConditionedPrecision(LinAlgError):
    pass


@dataclass(eq=False)
class FullExtractor:
    t_norm: np.ndarray  # (C, F, D)
    _grams: Optional[np.ndarray] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.t_norm = np.asarray(self.t_norm, dtype=np.float64)
        if self.t_norm.ndim != 3 or self.t_norm.shape[2] < 1:
            raise ValueError("t_norm must be a (C, F, D) array with D >= 1")
        if not np.all(np.isfinite(self.t_norm)):
            raise ValueError("extractor blocks must be finite")

    @property
    def C(self) -> int:
        return self.t_norm.shape[0]

    @property
    def F(self) -> int:
        return self.t_norm.shape[1]

    @property
    def D(self) -> int:
        return self.t_norm.shape[2]

    def blocks(self) -> np.ndarray:
        return self.t_norm

    def materialize(self, c: int) -> np.ndarray:
        return self.t_norm[c]

    def parameter_count(self) -> int:
        return self.C * self.F * self.D


@dataclass(eq=False)
class FactorizedExtractor:
    bases: np.ndarray   # (Q, F, D)
    coeffs: np.ndarray  # (C, Q)
    _grams: Optional[np.ndarray] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.bases = np.asarray(self.bases, dtype=np.float64)
        self.coeffs = np.atleast_2d(np.asarray(self.coeffs, dtype=np.float64))
        if self.bases.ndim != 3 or self.bases.shape[0] < 1:
            raise ValueError("bases must be a (Q, F, D) array with Q >= 1")
        if self.coeffs.shape[1] != self.bases.shape[0]:
            raise ValueError("coeffs must be (C, Q) with Q matching the bases")
        if not (np.all(np.isfinite(self.bases)) and np.all(np.isfinite(self.coeffs))):
            raise ValueError("extractor parameters must be finite")

    @property
    def C(self) -> int:
        return self.coeffs.shape[0]

    @property
    def F(self) -> int:
        return self.bases.shape[1]

    @property
    def D(self) -> int:
        return self.bases.shape[2]

    @property
    def Q(self) -> int:
        return self.bases.shape[0]

    def materialize(self, c: int) -> np.ndarray:
        return np.tensordot(self.coeffs[c], self.bases, axes=1)

    def blocks(self) -> np.ndarray:
        return np.tensordot(self.coeffs, self.bases, axes=1)

    def to_full(self) -> FullExtractor:
        return FullExtractor(self.blocks())

    def parameter_count(self) -> int:
        return self.Q * self.C + self.Q * self.F * self.D


Extractor = Union[FullExtractor, FactorizedExtractor]


@dataclass
class IVector:
    phi: np.ndarray
    precision: Optional[np.ndarray] = None
    utterance_id: str = ""


def parameter_count(extractor: Extractor) -> int:
    return extractor.parameter_count()


def compute_grams(extractor: Extractor, method: str = "materialize") -> np.ndarray:
    """Per-component D x D matrices Tbar_c' Tbar_c.

    ``method="expand"`` (factorized only) uses
    sum_{q,r} a_cq a_cr U_q' U_r instead of materializing the blocks.
    """
    if method == "expand":
        if not isinstance(extractor, FactorizedExtractor):
            raise ValueError("the expansion route needs a factorized extractor")
        utu = np.einsum("qfd,rfe->qrde", extractor.bases, extractor.bases)
        return np.einsum("cq,cr,qrde->cde", extractor.coeffs, extractor.coeffs, utu)
    blocks = extractor.blocks()
    return np.einsum("cfd,cfe->cde", blocks, blocks)


def precompute_grams(extractor: Extractor) -> np.ndarray:
    """Build (once) and return the read-only Gram cache of an extractor."""
    if extractor._grams is None:
        grams = compute_grams(extractor)
        grams.setflags(write=False)
        extractor._grams = grams
    return extractor._grams


def cholesky_with_jitter(L: np.ndarray):
    try:
        return cho_factor(L, lower=True, check_finite=False)
    except LinAlgError:
        D = L.shape[0]
        jitter = 1e-8 * np.trace(L) / D
        try:
            return cho_factor(L + jitter * np.eye(D), lower=True, check_finite=False)
        except LinAlgError:
            raise IllConditionedPrecision("ill-conditioned precision") from None


def precision_matrices(grams: np.ndarray, n: np.ndarray) -> np.ndarray:
    """I + sum_c N_c G_c for a (U, C) batch of zero-order stats."""
    D = grams.shape[-1]
    return np.eye(D) + np.einsum("uc,cde->ude", n, grams)


def linear_terms(blocks: np.ndarray, f_norm: np.ndarray) -> np.ndarray:
    """sum_c Tbar_c' fbar_c for a (U, C, F) batch."""
    return np.einsum("cfd,ucf->ud", blocks, f_norm)


def _check_stats(n: np.ndarray, f_norm: np.ndarray, extractor: Extractor):
    if n.shape[-1] != extractor.C or f_norm.shape[-2:] != (extractor.C, extractor.F):
        raise ValueError(f"statistics of shape {n.shape}/{f_norm.shape} do not match extractor "
                         f"(C={extractor.C}, F={extractor.F})")
    if not (np.all(np.isfinite(n)) and np.all(np.isfinite(f_norm))):
        raise ValueError("non-finite statistics")


def extract_batch(extractor: Extractor, n: np.ndarray, f_norm: np.ndarray,
                  use_cache: bool = True, return_factors: bool = False):
    """i-vectors for stacked statistics: n (U, C), f_norm (U, C, F) -> (U, D).

    With ``return_factors`` also returns the Cholesky factors of every
    precision matrix, which the training code reuses for the backward pass.
    """
    n = np.atleast_2d(n)
    f_norm = f_norm.reshape((-1,) + f_norm.shape[-2:])
    _check_stats(n, f_norm, extractor)
    grams = precompute_grams(extractor) if use_cache else compute_grams(extractor)
    L = precision_matrices(grams, n)
    b = linear_terms(extractor.blocks(), f_norm)
    phi = np.empty_like(b)
    factors = []
    for u in range(len(b)):
        fac = cholesky_with_jitter(L[u])
        phi[u] = cho_solve(fac, b[u], check_finite=False)
        factors.append(fac)
    if return_factors:
        return phi, L, factors
    return phi


def extract(extractor: Extractor, stats: SuffStats, use_cache: bool = True) -> IVector:
    phi, L, _ = extract_batch(extractor, stats.n[None], stats.f_norm[None],
                              use_cache=use_cache, return_factors=True)
    return IVector(phi[0], L[0], stats.utterance_id)


def extract_all(extractor: Extractor, stats: Sequence[SuffStats]) -> np.ndarray:
    n = np.stack([s.n for s in stats])
    f_norm = np.stack([s.f_norm for s in stats])
    return extract_batch(extractor, n, f_norm)


# ---------------------------------------------------------------------------
# Eigen-initialization of the factorized model
# ---------------------------------------------------------------------------

def _sign_fix(vecs: np.ndarray) -> np.ndarray:
    """Flip each row so that its largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(vecs), axis=1)
    signs = np.sign(vecs[np.arange(len(vecs)), idx])
    signs[signs == 0] = 1.0
    return vecs * signs[:, None]


def leading_directions(M: np.ndarray, Q: int, method: str = "auto") -> tuple[np.ndarray, np.ndarray]:
    """Top-Q right singular vectors (rows) and singular values of M (C x P).

    ``gram`` works through the C x C matrix M M', which is much cheaper when
    P greatly exceeds C.
    """
    C, P = M.shape
    if method == "auto":
        method = "gram" if P > 10 * C else "svd"
    if method == "svd":
        _, s, vt = np.linalg.svd(M, full_matrices=False)
    elif method == "gram":
        evals, evecs = np.linalg.eigh(M @ M.T)
        evals = np.clip(evals[::-1], 0.0, None)
        evecs = evecs[:, ::-1]
        s = np.sqrt(evals)
        with np.errstate(divide="ignore", invalid="ignore"):
            vt = (M.T @ evecs / np.where(s > 0, s, 1.0)).T
    else:
        raise ValueError(f"unknown method {method!r}")
    order = np.argsort(-s, kind="stable")
    s, vt = s[order], vt[order]
    tol = max(C, P) * np.finfo(float).eps * (s[0] if len(s) else 0.0)
    rank = int(np.sum(s > tol))
    k = min(Q, rank)
    dirs = np.zeros((Q, P))
    if k:
        top = vt[:k]
        if method == "gram":
            # re-orthonormalize; squaring the condition number costs accuracy
            q, r = np.linalg.qr(top.T)
            top = (q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))).T
        dirs[:k] = _sign_fix(top)
    sv = np.zeros(Q)
    sv[:k] = s[:k]
    return dirs, sv


def factorize(full: FullExtractor, Q: int, center: bool = False, method: str = "auto") -> FactorizedExtractor:
    """Initialize a Q-basis factorized extractor from the top singular directions.

    Rows of the stacked matrix are vec(Tbar_c).  Without centering the
    stack is represented exactly once Q reaches its rank.  Coefficients
    solve the least-squares system Tbar_c ~= sum_q a_cq U_q.
    """
    C, F, D = full.t_norm.shape
    if Q < 1:
        raise ValueError("Q must be at least 1")
    if Q > C:
        raise ValueError("Q must not exceed C")
    M = full.t_norm.reshape(C, F * D)
    source = M - M.mean(axis=0) if center else M
    dirs, sv = leading_directions(source, Q, method)
    n_zero = int(np.sum(~np.any(dirs != 0, axis=1)))
    if n_zero:
        warnings.warn(f"stacked extractor has rank {Q - n_zero} < Q={Q}; padding with zero bases",
                      RuntimeWarning)
    live = np.any(dirs != 0, axis=1)
    coeffs = np.zeros((C, Q))
    if live.any():
        coeffs[:, live] = np.linalg.lstsq(dirs[live].T, M.T, rcond=None)[0].T
    return FactorizedExtractor(dirs.reshape(Q, F, D), coeffs)


def reconstruction_residual(full: FullExtractor, fact: FactorizedExtractor, relative: bool = True) -> float:
    err = np.linalg.norm(full.t_norm - fact.blocks())
    if relative:
        return float(err / max(np.linalg.norm(full.t_norm), np.finfo(float).tiny))
    return float(err)
