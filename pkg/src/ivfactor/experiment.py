"""Desk-scale comparison of the generative baseline against factorized and
full discriminatively retrained extractors.

Systems, in report order:

    B       generative extractor
    A_init  eigen-initialized factorized extractor
    A       A_init after discriminative retraining
    R_init  random factorized extractor after the regularized phase0 epoch
    R       R_init after discriminative retraining
    F       full extractor discriminatively retrained from B
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .backend import Backend, fit_backend, score_matrix
from .config import to_text as config_text
from .extractor import Extractor, extract_batch
from .gmm import EMSettings, accumulate_stats, train_ubm
from .metrics import EerResult, compute_eer
from .synth import SynthConfig, generate_corpus
from .training import TrainConfig, build_train_set, train_generative
from .training.trainer import Trainer, history_csv

logger = logging.getLogger(__name__)

SYSTEMS = ("B", "A_init", "A", "R_init", "R", "F")


@dataclass
class ExperimentConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    D: int = 40
    D_lda: int = 20
    Q: int = 8
    ubm_iters: int = 20
    ubm_max_frames: int = 500000
    tv_iters: int = 10
    plda_iters: int = 20
    train_fraction: float = 0.75
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 42


@dataclass
class SystemResult:
    name: str
    eer: EerResult
    n_params: int
    seconds_per_epoch: Optional[float] = None
    backend: Optional[Backend] = field(default=None, repr=False)
    target_scores: np.ndarray = field(default=None, repr=False)
    nontarget_scores: np.ndarray = field(default=None, repr=False)


@dataclass
class Report:
    systems: dict
    histories: dict
    config: ExperimentConfig
    extractors: dict = field(default_factory=dict, repr=False)
    classifiers: dict = field(default_factory=dict, repr=False)
    ubm: Optional[object] = field(default=None, repr=False)

    def eers(self) -> dict:
        return {k: v.eer.eer for k, v in self.systems.items()}

    def _names(self) -> list:
        known = [s for s in SYSTEMS if s in self.systems]
        return known + [s for s in self.systems if s not in SYSTEMS]

    def to_tsv(self, condition: str = "desk-synth") -> str:
        names = self._names()
        rows = ["condition\t" + "\t".join(names),
                condition + "\t" + "\t".join(f"{self.systems[s].eer.eer:.2f}" for s in names),
                "n_params\t" + "\t".join("" if self.systems[s].n_params is None else str(self.systems[s].n_params)
                                          for s in names),
                "n_target\t" + "\t".join(str(self.systems[s].eer.n_target) for s in names),
                "n_nontarget\t" + "\t".join(str(self.systems[s].eer.n_nontarget) for s in names)]
        return "\n".join(rows) + "\n"

    def timing_tsv(self) -> str:
        names = self._names()
        cells = [("" if self.systems[s].seconds_per_epoch is None else f"{self.systems[s].seconds_per_epoch:.4f}")
                 for s in names]
        return "system\t" + "\t".join(names) + "\nseconds_per_epoch\t" + "\t".join(cells) + "\n"

    def metrics_jsonl(self) -> str:
        lines = []
        for s in self._names():
            r = self.systems[s]
            lines.append(json.dumps({"system": s, "eer": r.eer.eer, "threshold": r.eer.threshold,
                                     "n_target": r.eer.n_target, "n_nontarget": r.eer.n_nontarget,
                                     "n_params": r.n_params}, sort_keys=True))
        return "\n".join(lines) + "\n"


def trial_masks(speakers: list) -> tuple[np.ndarray, np.ndarray]:
    """Upper-triangular all-pairs trial masks (target, nontarget)."""
    spk = np.asarray(speakers)
    same = spk[:, None] == spk[None, :]
    upper = np.triu(np.ones_like(same, dtype=bool), k=1)
    return same & upper, ~same & upper


def evaluate_extractor(name: str, extractor: Extractor, train_stats, eval_stats, D_lda: int,
                       plda_iters: int = 20) -> SystemResult:
    def ivecs(stats):
        return extract_batch(extractor, np.stack([s.n for s in stats]), np.stack([s.f_norm for s in stats]))

    X_train = ivecs(train_stats)
    backend = fit_backend(X_train, [s.speaker_id for s in train_stats], D_lda, n_iter=plda_iters)
    Y = backend.transform(ivecs(eval_stats))
    S = score_matrix(backend.plda, Y, Y)
    tmask, nmask = trial_masks([s.speaker_id for s in eval_stats])
    tar, non = S[tmask], S[nmask]
    return SystemResult(name, compute_eer((tar, non)), extractor.parameter_count(), backend=backend,
                        target_scores=tar, nontarget_scores=non)


def _seconds_per_epoch(trainer: Trainer, phase: str = "phase2") -> Optional[float]:
    t = [s for p, s in trainer.epoch_seconds if p == phase]
    return float(np.mean(t)) if t else None


def run_experiment(config: Optional[ExperimentConfig] = None) -> Report:
    cfg = config or ExperimentConfig()
    t0 = time.perf_counter()
    corpus = generate_corpus(cfg.synth)
    train_utts, eval_utts = corpus.split(cfg.train_fraction)
    logger.info("corpus: %d train / %d eval utterances (%.1fs)", len(train_utts), len(eval_utts),
                time.perf_counter() - t0)

    ubm = train_ubm(train_utts, cfg.synth.C,
                    EMSettings(n_iter=cfg.ubm_iters, max_frames=cfg.ubm_max_frames, seed=cfg.seed))
    train_stats = [accumulate_stats(ubm, u) for u in train_utts]
    eval_stats = [accumulate_stats(ubm, u) for u in eval_utts]
    logger.info("UBM + stats done (%.1fs)", time.perf_counter() - t0)

    t_orig = train_generative(ubm, train_stats, cfg.D, cfg.tv_iters, seed=cfg.seed)
    logger.info("generative extractor done (%.1fs)", time.perf_counter() - t0)

    tc = cfg.train
    data = build_train_set(train_stats, tc.min_utts_per_speaker, tc.n_cv, tc.seed)
    results, histories, extractors, classifiers = {}, {}, {"B": t_orig}, {}

    def evaluate(name, ext, seconds=None):
        r = evaluate_extractor(name, ext, train_stats, eval_stats, cfg.D_lda, cfg.plda_iters)
        r.seconds_per_epoch = seconds
        results[name] = r
        extractors[name] = ext
        logger.info("%s: EER %.2f%% (%d params, %.1fs)", name, r.eer.eer, r.n_params, time.perf_counter() - t0)

    evaluate("B", t_orig)
    for scheme, init_name, name in (("scheme1", "A_init", "A"), ("scheme2", "R_init", "R"), ("full", None, "F")):
        trainer = Trainer(t_orig, data, replace(tc, scheme=scheme, Q=cfg.Q, D=cfg.D))
        res = trainer.train()
        histories[name] = res.history
        classifiers[name] = res.classifier
        if init_name:
            evaluate(init_name, res.init_extractor)
        evaluate(name, res.extractor, _seconds_per_epoch(trainer))
    return Report({s: results[s] for s in SYSTEMS}, histories, cfg, extractors, classifiers, ubm)


def write_report(report: Report, out, condition: str = "desk-synth", models: bool = True) -> Path:
    """Write the report directory atomically.

    ``report.tsv`` and ``metrics.jsonl`` hold the results, ``timing.tsv`` the
    wall-clock measurements (the only nondeterministic file), PNG figures sit
    alongside, and ``models/`` keeps every trained model.
    """
    from . import io as fio
    from .plotting import plot_det, plot_eer_bars, plot_training

    def fill(tmp: Path):
        (tmp / "report.tsv").write_text(report.to_tsv(condition), encoding="utf-8")
        (tmp / "metrics.jsonl").write_text(report.metrics_jsonl(), encoding="utf-8")
        (tmp / "timing.tsv").write_text(report.timing_tsv(), encoding="utf-8")
        if report.config is not None:
            (tmp / "config.txt").write_text(config_text(report.config), encoding="utf-8")
        curves = {k: (v.target_scores, v.nontarget_scores) for k, v in report.systems.items()
                  if v.target_scores is not None}
        if curves:
            plot_det(curves, tmp / "det.png", title=condition)
        plot_eer_bars(report.eers(), tmp / "eer.png",
                      {k: v.n_params for k, v in report.systems.items()}
                      if all(v.n_params is not None for v in report.systems.values()) else None)
        if report.histories:
            plot_training(report.histories, tmp / "training.png")
            for name, hist in report.histories.items():
                (tmp / f"history_{name}.csv").write_text(history_csv(hist), encoding="utf-8")
        if models:
            m = tmp / "models"
            m.mkdir()
            if report.ubm is not None:
                fio.save_ubm(m / "ubm.gubm", report.ubm)
            for name, ext in report.extractors.items():
                fio.save_extractor(m / f"{name}.ivex", ext)
            for name, r in report.systems.items():
                if r.backend is not None:
                    fio.save_backend(m / f"{name}.plda", r.backend)
            for name, clf in report.classifiers.items():
                fio.save_classifier(m / f"{name}.clsf", clf)

    return fio.atomic_directory(out, fill)
