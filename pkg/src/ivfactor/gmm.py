"""GMM-UBM, frame posteriors and Baum-Welch statistics.

Covariances are diagonal by default; ``full=True`` switches to full
matrices.  Every component caches a whitener ``W`` with ``W S W' = I``
(the inverse Cholesky factor of its covariance ``S``), which is what the
normalized first-order statistics are built from.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class FeatureMatrix:
    frames: np.ndarray
    utterance_id: str
    speaker_id: Optional[str] = None

    def __post_init__(self):
        self.frames = np.atleast_2d(np.asarray(self.frames, dtype=np.float64))
        if self.frames.shape[0] < 1:
            raise ValueError(f"{self.utterance_id}: utterance has no frames")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError(f"{self.utterance_id}: non-finite feature values")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass(eq=False)
class GmmUbm:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray  # (C, F) when diagonal, (C, F, F) when full
    full: bool = False
    whiteners: np.ndarray = field(init=False, repr=False)
    _log_det_w: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.covariances = np.asarray(self.covariances, dtype=np.float64)
        C, F = self.means.shape
        if self.weights.shape != (C,):
            raise ValueError("weights must have one entry per component")
        if abs(self.weights.sum() - 1.0) > 1e-10 or np.any(self.weights < 0):
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if self.full:
            if self.covariances.shape != (C, F, F):
                raise ValueError(f"full covariances must have shape {(C, F, F)}")
            chol = np.linalg.cholesky(self.covariances)  # raises if not PD
            eye = np.eye(F)
            self.whiteners = np.stack([solve_triangular(l, eye, lower=True) for l in chol])
            self._log_det_w = -np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
        else:
            if self.covariances.shape != (C, F):
                raise ValueError(f"diagonal covariances must have shape {(C, F)}")
            if np.any(self.covariances <= 0):
                raise ValueError("variances must be positive")
            self.whiteners = 1.0 / np.sqrt(self.covariances)
            self._log_det_w = np.log(self.whiteners).sum(axis=1)
        for arr in (self.weights, self.means, self.covariances, self.whiteners):
            arr.setflags(write=False)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def covariance_matrix(self, c: int) -> np.ndarray:
        if self.full:
            return self.covariances[c]
        return np.diag(self.covariances[c])

    def whitener_matrix(self, c: int) -> np.ndarray:
        """Sigma_c^(-1/2) as a dense F x F matrix."""
        if self.full:
            return self.whiteners[c]
        return np.diag(self.whiteners[c])

    def whiten(self, x: np.ndarray) -> np.ndarray:
        """Apply each component's whitener to the matching row of a (..., C, F) array."""
        if self.full:
            return np.einsum("cij,...cj->...ci", self.whiteners, x)
        return x * self.whiteners

    def unwhiten(self, x: np.ndarray) -> np.ndarray:
        if self.full:
            chol = np.linalg.cholesky(self.covariances)
            return np.einsum("cij,...cj->...ci", chol, x)
        return x * np.sqrt(self.covariances)

    def component_loglik(self, frames: np.ndarray) -> np.ndarray:
        """log w_c + log N(o_t; m_c, S_c) for every frame and component, shape (T, C)."""
        frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
        if frames.shape[1] != self.dim:
            raise ValueError(f"frame dimension {frames.shape[1]} does not match UBM dimension {self.dim}")
        if not np.all(np.isfinite(frames)):
            raise ValueError("non-finite values in frames")
        with np.errstate(divide="ignore"):  # a zero-weight component just gets -inf
            const = np.log(self.weights) + self._log_det_w - 0.5 * self.dim * LOG_2PI
        if self.full:
            out = np.empty((frames.shape[0], self.n_components))
            for c in range(self.n_components):
                z = (frames - self.means[c]) @ self.whiteners[c].T
                out[:, c] = -0.5 * np.einsum("ij,ij->i", z, z)
            return out + const
        prec = self.whiteners ** 2
        quad = (frames ** 2) @ prec.T - 2.0 * frames @ (self.means * prec).T
        quad += np.sum(self.means ** 2 * prec, axis=1)
        return -0.5 * quad + const


def _as_frames(frames) -> np.ndarray:
    if isinstance(frames, FeatureMatrix):
        return frames.frames
    return np.atleast_2d(np.asarray(frames, dtype=np.float64))


def frame_posteriors(ubm: GmmUbm, frames) -> np.ndarray:
    """Occupation probabilities gamma_t(c), rows summing to one."""
    ll = ubm.component_loglik(_as_frames(frames))
    return np.exp(ll - logsumexp(ll, axis=1, keepdims=True))


def log_likelihood(ubm: GmmUbm, frames) -> float:
    return float(logsumexp(ubm.component_loglik(_as_frames(frames)), axis=1).sum())


@dataclass
class SuffStats:
    n: np.ndarray       # (C,)
    f: np.ndarray       # (C, F)
    f_norm: np.ndarray  # (C, F)
    total_frames: float
    utterance_id: str = ""
    speaker_id: Optional[str] = None

    def __add__(self, other: "SuffStats") -> "SuffStats":
        return SuffStats(self.n + other.n, self.f + other.f, self.f_norm + other.f_norm,
                         self.total_frames + other.total_frames, self.utterance_id, self.speaker_id)

    def scaled(self, alpha: float) -> "SuffStats":
        return SuffStats(alpha * self.n, alpha * self.f, alpha * self.f_norm,
                         alpha * self.total_frames, self.utterance_id, self.speaker_id)


def normalize_first_order(ubm: GmmUbm, n: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Centre on the UBM means and whiten: S_c^(-1/2) (f_c - N_c m_c)."""
    return ubm.whiten(f - n[..., None] * ubm.means)


def accumulate_stats(ubm: GmmUbm, frames) -> SuffStats:
    utt, spk = "", None
    if isinstance(frames, FeatureMatrix):
        utt, spk = frames.utterance_id, frames.speaker_id
    x = _as_frames(frames)
    if x.shape[1] != ubm.dim:
        raise ValueError(f"frame dimension {x.shape[1]} does not match UBM dimension {ubm.dim}")
    gamma = frame_posteriors(ubm, x)
    n = gamma.sum(axis=0)
    f = gamma.T @ x
    return SuffStats(n, f, normalize_first_order(ubm, n, f), float(x.shape[0]), utt, spk)


def stack_stats(stats: Sequence[SuffStats]) -> tuple[np.ndarray, np.ndarray]:
    """(U, C) zero-order and (U, C, F) normalized first-order arrays."""
    return np.stack([s.n for s in stats]), np.stack([s.f_norm for s in stats])


# ---------------------------------------------------------------------------
# UBM training
# ---------------------------------------------------------------------------

@dataclass
class EMSettings:
    n_iter: int = 20
    full: bool = False
    variance_floor: Optional[float] = None  # None: max(1e-6, 1e-3 * mean global variance)
    init_frames: int = 20000
    max_frames: Optional[int] = None
    reseed_patience: int = 3
    seed: int = 0


def default_variance_floor(frames: np.ndarray) -> float:
    return max(1e-6, 1e-3 * float(np.mean(frames.var(axis=0))))


def _floor_covariance(cov: np.ndarray, floor: float, full: bool) -> tuple[np.ndarray, bool]:
    if not full:
        hit = cov <= floor
        return np.maximum(cov, floor), bool(np.all(hit))
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    hit = vals <= floor
    vals = np.maximum(vals, floor)
    return (vecs * vals) @ vecs.T, bool(np.all(hit))


def train_ubm(features: Iterable, C: int, config: Optional[EMSettings] = None,
              history: Optional[list] = None) -> GmmUbm:
    """Maximum-likelihood GMM by EM, initialized with k-means++.

    ``history`` (if given) receives the total log-likelihood evaluated at
    the start of every iteration plus one final value.
    """
    config = config or EMSettings()
    if C < 1:
        raise ValueError("C must be at least 1")
    mats = [_as_frames(x) for x in features]
    mats = [m for m in mats if m.size]
    if not mats:
        raise ValueError("no training frames")
    X = np.concatenate(mats, axis=0)
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite values in training frames")
    T, F = X.shape
    if T < 10 * C * F:
        warnings.warn(f"only {T} frames for C={C}, F={F}; EM estimates will be poor", RuntimeWarning)
    rng = np.random.default_rng(config.seed)
    if config.max_frames is not None and T > config.max_frames:
        X = X[np.sort(rng.choice(T, config.max_frames, replace=False))]
        T = X.shape[0]
    floor = config.variance_floor if config.variance_floor is not None else default_variance_floor(X)
    full = config.full

    global_var = np.maximum(X.var(axis=0), floor)
    if C == 1:
        means = X.mean(axis=0, keepdims=True)
    else:
        sub = X if T <= config.init_frames else X[np.sort(rng.choice(T, config.init_frames, replace=False))]
        means, _ = kmeans2(sub, C, minit="++", seed=rng)
    weights = np.full(C, 1.0 / C)
    covs = np.stack([np.diag(global_var) if full else global_var.copy() for _ in range(C)])
    ubm = GmmUbm(weights, means, covs, full=full)

    strikes = np.zeros(C, dtype=int)
    for it in range(config.n_iter):
        ll = ubm.component_loglik(X)
        tot = logsumexp(ll, axis=1, keepdims=True)
        if history is not None:
            history.append(float(tot.sum()))
        gamma = np.exp(ll - tot)
        n = gamma.sum(axis=0)
        weights = n / n.sum()
        safe_n = np.maximum(n, 1e-10)[:, None]
        means = (gamma.T @ X) / safe_n
        if full:
            covs = np.empty((C, F, F))
            for c in range(C):
                d = X - means[c]
                covs[c] = (gamma[:, c, None] * d).T @ d / safe_n[c]
        else:
            covs = (gamma.T @ X ** 2) / safe_n - means ** 2
        collapsed = np.zeros(C, dtype=bool)
        for c in range(C):
            covs[c], all_floored = _floor_covariance(covs[c], floor, full)
            collapsed[c] = all_floored or n[c] < 1.0
        strikes = np.where(collapsed, strikes + 1, 0)
        if C > 1 and np.any(strikes >= config.reseed_patience):
            worst = np.argsort(tot[:, 0], kind="stable")
            for k, c in enumerate(np.flatnonzero(strikes >= config.reseed_patience)):
                warnings.warn(f"UBM component {c} collapsed; re-seeding", RuntimeWarning)
                means[c] = X[worst[k]]
                covs[c] = np.diag(global_var) if full else global_var
                weights[c] = 1.0 / C
                strikes[c] = 0
            weights /= weights.sum()
        weights = weights / weights.sum()
        ubm = GmmUbm(weights, means, covs, full=full)
        logger.debug("UBM EM iteration %d: avg loglik %.5f", it, tot.mean())
    if history is not None:
        history.append(log_likelihood(ubm, X))
    return ubm
