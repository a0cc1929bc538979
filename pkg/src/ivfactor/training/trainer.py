"""Discriminative retraining of full and factorized extractors.

Schedules:

* ``scheme1`` -- eigen-initialized bases, lambda = 0 throughout,
  phase1 (classifier only) then phase2 (classifier + extractor).
* ``scheme2`` -- random bases, one phase0 epoch pulling the blocks towards
  the generative extractor with lambda = 1e5, then phase1 and phase2 with
  lambda = 0.
* ``full`` -- the blocks themselves are trained, starting from the
  generative extractor, phase1 then phase2.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ..config import load_config, to_text as config_text
from ..extractor import Extractor, FactorizedExtractor, FullExtractor, factorize
from ..gmm import SuffStats
from .objective import Classifier, backward, classifier_gradients, cross_entropy_loss, forward, regularizer

logger = logging.getLogger(__name__)

SCHEMES = ("scheme1", "scheme2", "full")
_SCHEME_ALIASES = {"1": "scheme1", "2": "scheme2", "full": "full", "scheme1": "scheme1", "scheme2": "scheme2"}


def normalize_scheme(scheme: str) -> str:
    try:
        return _SCHEME_ALIASES[str(scheme)]
    except KeyError:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of 1, 2, full") from None


@dataclass
class TrainConfig:
    scheme: str = "scheme2"
    Q: int = 8
    D: int = 40
    lr_phase0: float = 1e-7
    lr_phase1: float = 5.0
    lr_phase2: float = 0.01
    lr_phase2_full: float = 0.1
    batch_size: int = 64
    phase0_batch_size: int = 8
    max_epochs: int = 100
    patience: int = 3
    min_rel_improvement: float = 1e-4
    seed: int = 0
    lambda0: float = 1e5
    phase0_epochs: int = 1
    min_utts_per_speaker: int = 5
    n_cv: int = 500
    use_bias: bool = True
    center: bool = False

    def __post_init__(self):
        self.scheme = normalize_scheme(self.scheme)

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        """Read a UTF-8 ``key=value`` file; blank lines and ``#`` comments are skipped."""
        return load_config(cls, path, **overrides)

    def to_text(self) -> str:
        return config_text(self)


@dataclass
class TrainSet:
    n: np.ndarray         # (N, C)
    f_norm: np.ndarray    # (N, C, F)
    labels: np.ndarray    # (N,)
    cv_n: np.ndarray
    cv_f_norm: np.ndarray
    cv_labels: np.ndarray
    speakers: list        # label index -> speaker id

    @property
    def K(self) -> int:
        return len(self.speakers)

    @property
    def N(self) -> int:
        return len(self.labels)


def build_train_set(stats: Sequence[SuffStats], min_utts: int = 5, n_cv: int = 500,
                    seed: int = 0) -> TrainSet:
    """Keep speakers with at least ``min_utts`` utterances and hold out one
    utterance from each of up to ``n_cv`` of them for cross-validation."""
    by_spk: dict = {}
    for i, s in enumerate(stats):
        if s.speaker_id is None:
            raise ValueError(f"utterance {s.utterance_id!r} has no speaker label")
        by_spk.setdefault(s.speaker_id, []).append(i)
    speakers = sorted(k for k, v in by_spk.items() if len(v) >= min_utts)
    if len(speakers) < 2:
        raise ValueError("need at least K >= 2 speakers with enough utterances")
    rng = np.random.default_rng(seed)
    cv_spk = rng.permutation(len(speakers))[:min(n_cv, len(speakers))]
    cv_idx = {by_spk[speakers[k]][int(rng.integers(len(by_spk[speakers[k]])))] for k in cv_spk}
    train, cv = [], []
    for k, spk in enumerate(speakers):
        for i in by_spk[spk]:
            (cv if i in cv_idx else train).append((i, k))
    if not cv:
        raise ValueError("cross-validation set is empty")

    def pack(items):
        idx = [i for i, _ in items]
        return (np.stack([stats[i].n for i in idx]), np.stack([stats[i].f_norm for i in idx]),
                np.array([k for _, k in items], dtype=np.int64))

    n, f, y = pack(train)
    cn, cf, cy = pack(cv)
    return TrainSet(n, f, y, cn, cf, cy, speakers)


def constant_lambda(lambda0: float) -> Callable[[int], float]:
    """Default phase0 schedule: the same lambda for every phase0 epoch."""
    return lambda epoch: lambda0


def exponential_lambda(lambda0: float, decay: float) -> Callable[[int], float]:
    return lambda epoch: lambda0 * decay ** epoch


@dataclass
class TrainerState:
    phase: str = "phase0"
    epoch: int = 0
    lr: float = 0.0
    lam: float = 0.0
    best_cv: float = np.inf
    bad_epochs: int = 0
    seed: int = 0


@dataclass
class TrainResult:
    extractor: Extractor
    classifier: Classifier
    init_extractor: Extractor
    history: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)

    def history_csv(self) -> str:
        return history_csv(self.history)


def history_csv(history: list) -> str:
    lines = ["epoch,phase,train_loss,cv_loss,reg_distance,lr"]
    for h in history:
        lines.append(f"{h['epoch']},{h['phase']},{h['train_loss']!r},{h['cv_loss']!r},"
                     f"{h['reg_distance']!r},{h['lr']!r}")
    return "\n".join(lines) + "\n"


def random_factorized(C: int, F: int, D: int, Q: int, rng: np.random.Generator) -> FactorizedExtractor:
    # unit-scale materialized blocks: E||Tbar_c||_F^2 = 1
    bases = rng.standard_normal((Q, F, D)) / np.sqrt(F * D)
    coeffs = rng.standard_normal((C, Q)) / np.sqrt(Q)
    return FactorizedExtractor(bases, coeffs)


def _copy_extractor(ext: Extractor) -> Extractor:
    if isinstance(ext, FactorizedExtractor):
        return FactorizedExtractor(ext.bases.copy(), ext.coeffs.copy())
    return FullExtractor(ext.t_norm.copy())


def _apply(ext: Extractor, clf: Classifier, grads, lr: float, train_ext: bool, train_clf: bool):
    if train_clf:
        clf.W -= lr * grads.W
        if clf.use_bias:
            clf.b -= lr * grads.b
    if train_ext:
        if isinstance(ext, FactorizedExtractor):
            ext.bases -= lr * grads.bases
            ext.coeffs -= lr * grads.coeffs
        else:
            ext.t_norm -= lr * grads.blocks


class Trainer:
    def __init__(self, t_orig: FullExtractor, data: TrainSet, config: TrainConfig,
                 lambda_schedule: Optional[Callable[[int], float]] = None):
        if data.K < 2:
            raise ValueError("need at least K >= 2 speakers")
        if len(data.cv_labels) == 0:
            raise ValueError("cross-validation set is empty")
        self.t_orig = t_orig
        self.data = data
        self.config = config
        self.lambda_schedule = lambda_schedule or constant_lambda(config.lambda0)
        self.rng = np.random.default_rng(config.seed)
        self.state = TrainerState(seed=config.seed)
        self.history: list = []
        self.epoch_seconds: list = []

    # -- evaluation helpers -------------------------------------------------
    def _phis(self, ext: Extractor):
        blocks = ext.blocks()
        return (forward(blocks, self.data.n, self.data.f_norm).phi,
                forward(blocks, self.data.cv_n, self.data.cv_f_norm).phi)

    def _record(self, ext: Extractor, clf: Classifier, phis=None) -> float:
        train_phi, cv_phi = phis if phis is not None else self._phis(ext)
        train_loss = cross_entropy_loss(clf, train_phi, self.data.labels)
        cv_loss = cross_entropy_loss(clf, cv_phi, self.data.cv_labels)
        s = self.state
        self.history.append(dict(epoch=s.epoch, phase=s.phase, train_loss=train_loss, cv_loss=cv_loss,
                                 reg_distance=regularizer(ext, self.t_orig), lr=s.lr))
        logger.info("%s epoch %d: train %.4f cv %.4f lr %.3g", s.phase, s.epoch, train_loss, cv_loss, s.lr)
        return cv_loss

    # -- phases -------------------------------------------------------------
    def phase0(self, ext: Extractor, clf: Classifier) -> None:
        """Regularizer-dominated epochs; the classifier is never touched."""
        cfg = self.config
        self.state.phase = "phase0"
        self.state.lr = cfg.lr_phase0
        for e in range(cfg.phase0_epochs):
            self.state.lam = lam = self.lambda_schedule(e)
            self.state.epoch += 1
            t0 = time.perf_counter()
            for idx in self._batches(cfg.phase0_batch_size):
                _, grads = backward(ext, self.data.n[idx], self.data.f_norm[idx], clf, self.data.labels[idx],
                                    lam=lam, t_orig=self.t_orig.t_norm)
                _apply(ext, clf, grads, self.state.lr, train_ext=True, train_clf=False)
            self.epoch_seconds.append(("phase0", time.perf_counter() - t0))
            self._record(ext, clf)
        self.state.lam = 0.0

    def run_phase(self, phase: str, ext: Extractor, clf: Classifier, lr: float, train_ext: bool):
        """SGD until the CV loss stops improving, then restore the best epoch."""
        cfg = self.config
        s = self.state
        s.phase, s.lr, s.lam = phase, lr, 0.0
        s.best_cv, s.bad_epochs = np.inf, 0
        best = (_copy_extractor(ext), clf.copy())
        phis = None if train_ext else self._phis(ext)
        for _ in range(cfg.max_epochs):
            s.epoch += 1
            t0 = time.perf_counter()
            for idx in self._batches():
                if train_ext:
                    _, grads = backward(ext, self.data.n[idx], self.data.f_norm[idx], clf, self.data.labels[idx])
                else:
                    grads = classifier_gradients(clf, phis[0][idx], self.data.labels[idx])
                _apply(ext, clf, grads, s.lr, train_ext=train_ext, train_clf=True)
            self.epoch_seconds.append((phase, time.perf_counter() - t0))
            cv = self._record(ext, clf, None if train_ext else phis)
            if cv < s.best_cv * (1.0 - cfg.min_rel_improvement):
                s.best_cv, s.bad_epochs = cv, 0
                best = (_copy_extractor(ext), clf.copy())
            else:
                s.bad_epochs += 1
                s.lr *= 0.5
                if s.bad_epochs >= cfg.patience:
                    break
        return best

    def _batches(self, batch_size: Optional[int] = None):
        order = self.rng.permutation(self.data.N)
        bs = batch_size or self.config.batch_size
        return [order[i:i + bs] for i in range(0, len(order), bs)]

    # -- schedules ----------------------------------------------------------
    def initial_extractor(self) -> Extractor:
        cfg = self.config
        C, F, D = self.t_orig.t_norm.shape
        if cfg.scheme == "scheme1":
            return factorize(self.t_orig, cfg.Q, center=cfg.center)
        if cfg.scheme == "scheme2":
            return random_factorized(C, F, D, cfg.Q, self.rng)
        return FullExtractor(self.t_orig.t_norm.copy())

    def train(self) -> TrainResult:
        cfg = self.config
        ext = self.initial_extractor()
        clf = Classifier.zeros(self.data.K, ext.D, cfg.use_bias)
        # epoch 0 records the starting point, including the distance to T_orig
        self.state.phase, self.state.lr = "init", 0.0
        self._record(ext, clf)
        if cfg.scheme == "scheme2":
            self.phase0(ext, clf)
        init = _copy_extractor(ext)
        ext, clf = self.run_phase("phase1", ext, clf, cfg.lr_phase1, train_ext=False)
        # a basis gradient sums over all C components, a full block only sees its own
        lr2 = cfg.lr_phase2_full if cfg.scheme == "full" else cfg.lr_phase2
        ext, clf = self.run_phase("phase2", ext, clf, lr2, train_ext=True)
        return TrainResult(ext, clf, init, self.history, self.epoch_seconds)


def train(scheme: str, ubm, t_orig: FullExtractor, train_set, config: Optional[TrainConfig] = None,
          lambda_schedule: Optional[Callable[[int], float]] = None) -> TrainResult:
    """Discriminatively retrain an extractor.

    ``train_set`` is either a prepared :class:`TrainSet` or a sequence of
    speaker-labelled :class:`SuffStats`.
    """
    config = config or TrainConfig()
    config.scheme = normalize_scheme(scheme)
    if not isinstance(train_set, TrainSet):
        train_set = build_train_set(train_set, config.min_utts_per_speaker, config.n_cv, config.seed)
    if ubm is not None and (ubm.n_components, ubm.dim) != t_orig.t_norm.shape[:2]:
        raise ValueError("extractor does not match the UBM dimensions")
    return Trainer(t_orig, train_set, config, lambda_schedule).train()
