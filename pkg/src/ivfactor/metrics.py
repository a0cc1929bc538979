"""Equal error rate on the ROC convex hull, plus DET-curve points."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm


@dataclass
class EerResult:
    eer: float          # percent
    threshold: float
    n_target: int
    n_nontarget: int


def _split(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = list(labels)
    if len(labels) != len(scores):
        raise ValueError("every score needs a label")
    is_tgt = []
    for lab in labels:
        if lab is None or (isinstance(lab, str) and lab not in ("target", "nontarget")):
            raise ValueError(f"missing or unknown trial label {lab!r}")
        is_tgt.append(lab == "target" if isinstance(lab, str) else bool(lab))
    is_tgt = np.array(is_tgt, dtype=bool)
    return scores[is_tgt], scores[~is_tgt]


def roc_points(tar: np.ndarray, non: np.ndarray):
    """Operating points (pfa, pmiss, threshold) for "accept if score >= threshold".

    One point per distinct score plus the reject-all point at +inf, ordered
    by increasing threshold.
    """
    tar, non = np.sort(tar), np.sort(non)
    thr = np.unique(np.concatenate([tar, non]))
    pmiss = np.searchsorted(tar, thr, side="left") / len(tar)
    pfa = 1.0 - np.searchsorted(non, thr, side="left") / len(non)
    return (np.append(pfa, 0.0), np.append(pmiss, 1.0), np.append(thr, np.inf))


def _lower_hull(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Indices of the lower convex hull of points already sorted by x."""
    hull: list = []
    for i in range(len(x)):
        while len(hull) >= 2:
            o, a = hull[-2], hull[-1]
            cross = (x[a] - x[o]) * (y[i] - y[o]) - (y[a] - y[o]) * (x[i] - x[o])
            if cross <= 0:
                hull.pop()
            else:
                break
        hull.append(i)
    return np.array(hull)


def compute_eer(scores, labels=None) -> EerResult:
    """EER where the ROC convex hull crosses pmiss == pfa.

    Call as ``compute_eer(scores, labels)`` or ``compute_eer(target_scores,
    nontarget_scores)`` with ``labels`` omitted and a tuple as first argument.
    """
    if labels is None:
        tar, non = (np.asarray(a, dtype=np.float64) for a in scores)
    else:
        tar, non = _split(scores, labels)
    if len(tar) < 1 or len(non) < 1:
        raise ValueError("EER needs at least one target and one non-target trial")
    pfa, pmiss, thr = roc_points(tar, non)
    # hull is taken with pfa ascending, i.e. thresholds descending
    order = np.arange(len(pfa))[::-1]
    x, y, t = pfa[order], pmiss[order], thr[order]
    h = _lower_hull(x, y)
    x, y, t = x[h], y[h], t[h]
    diff = y - x  # starts >= 0 at pfa = 0, ends <= 0 at pfa = 1
    k = int(np.flatnonzero(diff <= 0)[0])
    if diff[k] == 0 or k == 0:
        eer, threshold = x[k], t[k]
    else:
        frac = diff[k - 1] / (diff[k - 1] - diff[k])
        eer = x[k - 1] + frac * (x[k] - x[k - 1])
        lo, hi = t[k - 1], t[k]
        threshold = hi if not np.isfinite(lo) else lo + frac * (hi - lo)
    return EerResult(100.0 * float(eer), float(threshold), len(tar), len(non))


def det_points(tar: np.ndarray, non: np.ndarray, clip: float = 1e-4):
    """Probit-scaled (pfa, pmiss) of every operating point, for DET plots."""
    pfa, pmiss, _ = roc_points(np.asarray(tar), np.asarray(non))
    return norm.ppf(np.clip(pfa, clip, 1 - clip)), norm.ppf(np.clip(pmiss, clip, 1 - clip))
