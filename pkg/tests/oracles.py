"""Independent reference computations used by the tests.

None of these call into the code under test beyond reading model
parameters, so agreement is a genuine cross-check.
"""
import itertools

import numpy as np
from scipy.optimize import minimize


def naive_posteriors(weights, means, covs, X):
    """Frame posteriors from explicitly evaluated Gaussian densities (log domain)."""
    C = len(weights)
    T = len(X)
    logd = np.zeros((T, C))
    for c in range(C):
        S = covs[c] if covs[c].ndim == 2 else np.diag(covs[c])
        d = X - means[c]
        sign, logdet = np.linalg.slogdet(2 * np.pi * S)
        logd[:, c] = np.log(weights[c]) - 0.5 * logdet - 0.5 * np.einsum("ti,ij,tj->t", d, np.linalg.inv(S), d)
    logd -= logd.max(axis=1, keepdims=True)
    g = np.exp(logd)
    return g / g.sum(axis=1, keepdims=True)


def posterior_mode(weights, means, covs, t_raw, X):
    """Mode of p(phi | frames) under o_t ~ sum_c gamma_tc N(m_c + T_c phi, S_c), phi ~ N(0, I),
    found by quasi-Newton optimization of the frame-level log density.

    ``t_raw`` holds the un-normalized blocks T_c, shape (C, F, D).
    """
    gamma = naive_posteriors(weights, means, covs, X)
    C, F, D = t_raw.shape
    precs = [np.linalg.inv(covs[c] if covs[c].ndim == 2 else np.diag(covs[c])) for c in range(C)]

    def objective(phi):
        val = 0.5 * phi @ phi
        grad = phi.copy()
        for c in range(C):
            r = X - means[c] - t_raw[c] @ phi          # (T, F)
            w = gamma[:, c]
            val += 0.5 * np.einsum("t,ti,ij,tj->", w, r, precs[c], r)
            grad -= t_raw[c].T @ precs[c] @ (w @ r)
        return val, grad

    res = minimize(objective, np.zeros(D), jac=True, method="BFGS",
                   options={"gtol": 1e-11, "maxiter": 10000})
    return res.x


def sweep_eer(tar, non):
    """EER by exhaustive search over mixtures of raw operating points.

    The ROC-hull EER equals max over w in [0, 1] of min over every threshold
    of w * pmiss + (1 - w) * pfa (a minimax over the convex hull).  The inner
    minimum is piecewise linear and concave in w, so the maximum sits at an
    endpoint or at an intersection of two operating-point lines; all of
    those candidates are evaluated.
    """
    tar, non = np.asarray(tar, float), np.asarray(non, float)
    thr = np.concatenate([np.unique(np.concatenate([tar, non])), [np.inf]])
    pm = np.array([np.mean(tar < t) for t in thr])
    pf = np.array([np.mean(non >= t) for t in thr])
    # lines: value(w) = pf + w * (pm - pf)
    a, b = pf, pm - pf
    cands = {0.0, 1.0}
    for i, j in itertools.combinations(range(len(a)), 2):
        if b[i] != b[j]:
            w = (a[j] - a[i]) / (b[i] - b[j])
            if 0.0 <= w <= 1.0:
                cands.add(float(w))
    return 100.0 * max(float(np.min(a + w * b)) for w in cands)
