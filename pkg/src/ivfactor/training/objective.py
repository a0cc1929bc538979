"""Speaker cross-entropy, the L2 pull towards the generative extractor, and
their gradients with respect to every trainable parameter.

Gradient through the closed-form i-vector (per utterance, g = dE/dphi):

    v           = L^-1 g
    dE/dTbar_c += fbar_c v' - N_c Tbar_c (v phi' + phi v')

and for the factorized form Tbar_c = sum_q a_cq U_q:

    dE/dU_q  = sum_c a_cq dE/dTbar_c
    dE/da_cq = <dE/dTbar_c, U_q>_F
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_solve
from scipy.special import logsumexp

from ..extractor import (Extractor, FactorizedExtractor, FullExtractor, cholesky_with_jitter,
                         linear_terms, precision_matrices)


@dataclass(eq=False)
class Classifier:
    W: np.ndarray  # (K, D)
    b: np.ndarray  # (K,)
    use_bias: bool = True

    def __post_init__(self):
        self.W = np.atleast_2d(np.asarray(self.W, dtype=np.float64))
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.shape[0] < 2:
            raise ValueError("a speaker classifier needs K >= 2 classes")
        if self.b.shape != (self.W.shape[0],):
            raise ValueError("bias must have one entry per class")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.b))):
            raise ValueError("classifier parameters must be finite")

    @classmethod
    def zeros(cls, K: int, D: int, use_bias: bool = True) -> "Classifier":
        return cls(np.zeros((K, D)), np.zeros(K), use_bias)

    @property
    def K(self) -> int:
        return self.W.shape[0]

    def logits(self, phi: np.ndarray) -> np.ndarray:
        z = phi @ self.W.T
        return z + self.b if self.use_bias else z

    def log_posteriors(self, phi: np.ndarray) -> np.ndarray:
        z = self.logits(phi)
        return z - logsumexp(z, axis=1, keepdims=True)

    def copy(self) -> "Classifier":
        return Classifier(self.W.copy(), self.b.copy(), self.use_bias)


def cross_entropy_loss(classifier: Classifier, phi: np.ndarray, labels: np.ndarray,
                       reduction: str = "mean") -> float:
    """-sum_n log p(k_n | phi_n); ``reduction="mean"`` divides by the sample count."""
    phi = np.atleast_2d(phi)
    labels = np.asarray(labels)
    if not np.all(np.isfinite(phi)):
        raise ValueError("non-finite i-vectors")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= classifier.K:
        raise ValueError(f"labels must lie in [0, {classifier.K})")
    logp = classifier.log_posteriors(phi)
    total = -float(np.sum(logp[np.arange(len(labels)), labels]))
    return total / len(labels) if reduction == "mean" else total


def classifier_gradients(classifier: Classifier, phi: np.ndarray, labels: np.ndarray) -> "Gradients":
    """Mean cross-entropy gradients for W and b with the i-vectors held fixed."""
    logp = classifier.log_posteriors(phi)
    B = len(labels)
    dz = np.exp(logp)
    dz[np.arange(B), labels] -= 1.0
    dz /= B
    gb = dz.sum(axis=0) if classifier.use_bias else np.zeros(classifier.K)
    return Gradients(W=dz.T @ phi, b=gb)


def regularizer(extractor: Extractor, t_orig) -> float:
    """Squared Frobenius distance between normalized blocks."""
    ref = t_orig.t_norm if isinstance(t_orig, FullExtractor) else np.asarray(t_orig)
    blocks = extractor.blocks()
    if blocks.shape != ref.shape:
        raise ValueError(f"extractor shape {blocks.shape} differs from reference {ref.shape}")
    return float(np.sum((blocks - ref) ** 2))


@dataclass
class Gradients:
    W: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    blocks: Optional[np.ndarray] = None  # full extractor
    bases: Optional[np.ndarray] = None   # factorized extractor
    coeffs: Optional[np.ndarray] = None

    def items(self):
        return [(k, v) for k, v in vars(self).items() if v is not None]


@dataclass
class ForwardCache:
    phi: np.ndarray
    factors: list


def forward(blocks: np.ndarray, n: np.ndarray, f_norm: np.ndarray) -> ForwardCache:
    grams = np.einsum("cfd,cfe->cde", blocks, blocks)
    L = precision_matrices(grams, n)
    bvec = linear_terms(blocks, f_norm)
    factors = [cholesky_with_jitter(L[u]) for u in range(len(bvec))]
    phi = np.stack([cho_solve(fac, bvec[u], check_finite=False) for u, fac in enumerate(factors)])
    return ForwardCache(phi, factors)


def block_gradient(blocks: np.ndarray, n: np.ndarray, f_norm: np.ndarray,
                   cache: ForwardCache, g_phi: np.ndarray) -> np.ndarray:
    """Pull dE/dphi (U, D) back onto the normalized blocks (C, F, D)."""
    v = np.stack([cho_solve(fac, g_phi[u], check_finite=False) for u, fac in enumerate(cache.factors)])
    phi = cache.phi
    sym = np.einsum("uc,ud,ue->cde", n, v, phi)
    sym = sym + sym.transpose(0, 2, 1)
    return np.einsum("ucf,ud->cfd", f_norm, v) - np.einsum("cfd,cde->cfe", blocks, sym)


def backward(extractor: Extractor, n: np.ndarray, f_norm: np.ndarray, classifier: Classifier,
             labels: np.ndarray, lam: float = 0.0, t_orig: Optional[np.ndarray] = None,
             include_loss: bool = True) -> tuple[float, Gradients]:
    """Objective (mean cross-entropy + lam * regularizer) and its gradients.

    ``include_loss=False`` drops the cross-entropy term entirely, leaving
    only the regularizer (classifier gradients are then None).
    """
    n = np.atleast_2d(n)
    blocks = extractor.blocks()
    grads = Gradients()
    value = 0.0
    g_blocks = np.zeros_like(blocks)
    if include_loss:
        labels = np.asarray(labels)
        cache = forward(blocks, n, f_norm)
        logp = classifier.log_posteriors(cache.phi)
        B = len(labels)
        value = -float(np.sum(logp[np.arange(B), labels])) / B
        dz = np.exp(logp)
        dz[np.arange(B), labels] -= 1.0
        dz /= B
        grads.W = dz.T @ cache.phi
        grads.b = dz.sum(axis=0) if classifier.use_bias else np.zeros(classifier.K)
        g_blocks = block_gradient(blocks, n, f_norm, cache, dz @ classifier.W)
    if lam != 0.0:
        if t_orig is None:
            raise ValueError("regularization needs the reference extractor")
        diff = blocks - t_orig
        value += lam * float(np.sum(diff ** 2))
        g_blocks = g_blocks + 2.0 * lam * diff
    if isinstance(extractor, FactorizedExtractor):
        grads.bases = np.einsum("cq,cfd->qfd", extractor.coeffs, g_blocks)
        grads.coeffs = np.einsum("cfd,qfd->cq", g_blocks, extractor.bases)
    else:
        grads.blocks = g_blocks
    return value, grads
