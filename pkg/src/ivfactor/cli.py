"""Command-line front end, one subcommand per pipeline stage.

Every command validates its inputs before doing any work, writes outputs
atomically and, on failure, prints a single tab-separated line

    error<TAB>kind<TAB>message

to stderr and exits nonzero (2 for usage errors, 1 otherwise).  Relative
paths are resolved against ``$IVFACTOR_DATA_ROOT`` when it is set.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import io as fio
from .backend import fit_backend, score_matrix
from .config import load_config, to_text
from .experiment import (ExperimentConfig, Report, SystemResult, run_experiment, trial_masks,
                         write_report)
from .extractor import FactorizedExtractor, extract_batch, factorize
from .gmm import EMSettings, accumulate_stats, train_ubm
from .metrics import compute_eer
from .plotting import plot_det
from .synth import SynthConfig, generate_corpus
from .training import TrainConfig, build_train_set, train_generative
from .training.trainer import Trainer

DATA_ROOT_ENV = "IVFACTOR_DATA_ROOT"
log = logging.getLogger("ivfactor")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _root() -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, "."))


def _path(p) -> Path | None:
    if p is None:
        return None
    p = Path(p)
    return p if p.is_absolute() else _root() / p


def _need_file(p) -> Path:
    p = _path(p)
    if not p.is_file():
        raise FileNotFoundError(f"file not found: {p}")
    return p


def _need_dir(p) -> Path:
    p = _path(p)
    if not p.is_dir():
        raise FileNotFoundError(f"directory not found: {p}")
    return p


def _need_features(p) -> Path:
    p = _need_dir(p)
    fio.check_feature_archive(p)
    return p


def _need_ivectors(p) -> Path:
    p = _need_dir(p)
    for _, _, f in fio.read_manifest(p):
        if not f.is_file():
            raise FileNotFoundError(f"file not found: {f}")
    return p


def _stats_from_features(ubm, features: Path):
    return [accumulate_stats(ubm, u) for u in fio.read_feature_archive(features)]


# -- commands -----------------------------------------------------------------

def cmd_synth(args) -> None:
    cfg = load_config(SynthConfig, _need_file(args.config) if args.config else None, seed=args.seed)
    out = _path(args.out)
    corpus = generate_corpus(cfg)
    train, test = corpus.split(args.train_fraction)
    tmask, nmask = trial_masks([u.speaker_id for u in test])
    trials = []
    for i, j in zip(*np.nonzero(tmask | nmask)):
        trials.append((test[i].utterance_id, test[j].utterance_id, "target" if tmask[i, j] else "nontarget"))

    def fill(tmp: Path):
        fio.write_feature_archive(tmp / "train", train)
        fio.write_feature_archive(tmp / "eval", test)
        (tmp / "trials.tsv").write_text(fio.trials_text(trials), encoding="utf-8")
        (tmp / "synth.cfg").write_text(to_text(cfg), encoding="utf-8")
        fio.save_ubm(tmp / "planted.gubm", corpus.ubm)
        fio.save_extractor(tmp / "planted.ivex", corpus.t_true)

    fio.atomic_directory(out, fill)
    log.info("wrote %d train / %d eval utterances and %d trials to %s", len(train), len(test), len(trials), out)


def cmd_train_ubm(args) -> None:
    features = _need_features(args.features)
    settings = load_config(EMSettings, _need_file(args.config) if args.config else None,
                           n_iter=args.iters, max_frames=args.max_frames, seed=args.seed)
    if args.full:
        settings = replace(settings, full=True)
    history: list = []
    ubm = train_ubm(fio.read_feature_archive(features), args.C, settings, history)
    fio.save_ubm(_path(args.out), ubm)
    log.info("UBM log-likelihood per frame: %s", " ".join(f"{v:.4f}" for v in history))


def cmd_stats(args) -> None:
    ubm_path, features = _need_file(args.ubm), _need_features(args.features)
    ubm = fio.load_ubm(ubm_path)
    fio.save_stats(_path(args.out), _stats_from_features(ubm, features))


def cmd_train_tv(args) -> None:
    ubm_path, stats_path = _need_file(args.ubm), _need_file(args.stats)
    ubm, stats = fio.load_ubm(ubm_path), fio.load_stats(stats_path)
    history: list = []
    T = train_generative(ubm, stats, args.D, args.iters, seed=args.seed if args.seed is not None else 0,
                         history=history)
    fio.save_extractor(_path(args.out), T)
    log.info("marginal log-likelihood: %s", " ".join(f"{v:.3f}" for v in history))


def cmd_factorize(args) -> None:
    full = fio.load_extractor(_need_file(args.extractor))
    if isinstance(full, FactorizedExtractor):
        full = full.to_full()
    if args.Q > full.C:
        raise ValueError("Q must not exceed C")
    fio.save_extractor(_path(args.out), factorize(full, args.Q, center=args.center))


def cmd_train_dix(args) -> None:
    ext_path, stats_path = _need_file(args.extractor), _need_file(args.stats)
    cfg_path = _need_file(args.config) if args.config else None
    t_orig, stats = fio.load_extractor(ext_path), fio.load_stats(stats_path)
    if isinstance(t_orig, FactorizedExtractor):
        t_orig = t_orig.to_full()
    cfg = load_config(TrainConfig, cfg_path, scheme=args.scheme, Q=args.Q, D=args.D, seed=args.seed)
    if cfg.D != t_orig.D:
        raise ValueError(f"D={cfg.D} does not match the extractor ({t_orig.D})")
    if cfg.scheme != "full" and cfg.Q > t_orig.C:
        raise ValueError("Q must not exceed C")
    data = build_train_set(stats, cfg.min_utts_per_speaker, cfg.n_cv, cfg.seed)
    trainer = Trainer(t_orig, data, cfg)
    res = trainer.train()
    spe = [s for p, s in trainer.epoch_seconds if p == "phase2"]

    def fill(tmp: Path):
        fio.save_extractor(tmp / "extractor.ivex", res.extractor)
        fio.save_extractor(tmp / "init.ivex", res.init_extractor)
        fio.save_classifier(tmp / "classifier.clsf", res.classifier)
        (tmp / "history.csv").write_text(res.history_csv(), encoding="utf-8")
        (tmp / "train.cfg").write_text(cfg.to_text(), encoding="utf-8")
        (tmp / "timing.tsv").write_text(
            "phase\tseconds_per_epoch\nphase2\t" + (f"{np.mean(spe):.4f}" if spe else "") + "\n", encoding="utf-8")

    fio.atomic_directory(_path(args.out), fill)


def cmd_extract(args) -> None:
    if (args.features is None) == (args.stats is None):
        raise UsageError("give exactly one of --features or --stats")
    if args.features is not None and args.ubm is None:
        raise UsageError("--features needs --ubm")
    ext_path = _need_file(args.extractor)
    if args.features is not None:
        ubm_path, features = _need_file(args.ubm), _need_features(args.features)
        ext = fio.load_extractor(ext_path)
        stats = _stats_from_features(fio.load_ubm(ubm_path), features)
    else:
        stats_path = _need_file(args.stats)
        ext = fio.load_extractor(ext_path)
        stats = fio.load_stats(stats_path)
    X = extract_batch(ext, np.stack([s.n for s in stats]), np.stack([s.f_norm for s in stats]))
    fio.write_ivector_archive(_path(args.out), [s.utterance_id for s in stats],
                              [s.speaker_id for s in stats], X)


def cmd_backend(args) -> None:
    _, spk, X = fio.read_ivector_archive(_need_ivectors(args.ivectors))
    if any(s is None for s in spk):
        raise ValueError(f"{args.ivectors}: backend training needs speaker labels for every i-vector")
    backend = fit_backend(X, spk, args.D_lda, length_norm=not args.no_length_norm, n_iter=args.iters)
    fio.save_backend(_path(args.out), backend)


def _score_trials(backend, ivec_dir: Path, trials_path: Path):
    ids, _, X = fio.read_ivector_archive(ivec_dir)
    trials = fio.read_trials(trials_path)
    index = {u: i for i, u in enumerate(ids)}
    for e, t, _ in trials:
        for u in (e, t):
            if u not in index:
                raise ValueError(f"{trials_path}: utterance {u!r} not in {ivec_dir}")
    Y = backend.transform(X)
    S = score_matrix(backend.plda, Y, Y)
    return [(e, t, float(S[index[e], index[t]]), lab) for e, t, lab in trials]


def cmd_eval(args) -> None:
    backend_path, ivecs, trials = _need_file(args.backend), _need_ivectors(args.ivectors), _need_file(args.trials)
    backend = fio.load_backend(backend_path)
    rows = _score_trials(backend, ivecs, trials)
    labelled = [(s, lab) for _, _, s, lab in rows if lab != "unk"]
    res = compute_eer([s for s, _ in labelled], [lab for _, lab in labelled]) if labelled else None
    name = args.name or _path(args.out).name

    def fill(tmp: Path):
        (tmp / "scores.tsv").write_text(fio.scores_text((e, t, s) for e, t, s, _ in rows), encoding="utf-8")
        if res is not None:
            (tmp / "metrics.jsonl").write_text(json.dumps(
                {"system": name, "eer": res.eer, "threshold": res.threshold,
                 "n_target": res.n_target, "n_nontarget": res.n_nontarget}, sort_keys=True) + "\n", encoding="utf-8")
            tar = np.array([s for s, lab in labelled if lab == "target"])
            non = np.array([s for s, lab in labelled if lab == "nontarget"])
            plot_det({name: (tar, non)}, tmp / "det.png", title=name)

    fio.atomic_directory(_path(args.out), fill)
    if res is not None:
        print(f"{name}\tEER\t{res.eer:.4f}")


def cmd_report(args) -> None:
    systems = {}
    dirs = [(name, _need_dir(d)) for name, d in args.system]
    for name, d in dirs:
        _need_file(d / "scores.tsv")
    ext_paths = {name: _need_file(p) for name, p in (args.extractor or [])}
    trials = {(e, t): lab for e, t, lab in fio.read_trials(_need_file(args.trials))}
    for name, d in dirs:
        tar, non = [], []
        for e, t, s in fio.read_scores(d / "scores.tsv"):
            lab = trials.get((e, t))
            if lab == "target":
                tar.append(s)
            elif lab == "nontarget":
                non.append(s)
        tar, non = np.array(tar), np.array(non)
        n_params = fio.load_extractor(ext_paths[name]).parameter_count() if name in ext_paths else None
        systems[name] = SystemResult(name, compute_eer((tar, non)), n_params,
                                     target_scores=tar, nontarget_scores=non)
    report = Report(systems, {}, None)
    write_report(report, _path(args.out), condition=args.condition, models=False)
    sys.stdout.write(report.to_tsv(args.condition))


def cmd_experiment(args) -> None:
    cfg = load_config(ExperimentConfig, _need_file(args.config) if args.config else None, Q=args.Q, D=args.D)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, synth=replace(cfg.synth, seed=args.seed),
                      train=replace(cfg.train, seed=args.seed))
    if cfg.Q > cfg.synth.C:
        raise ValueError("Q must not exceed C")
    report = run_experiment(cfg)
    write_report(report, _path(args.out), condition=args.condition)
    sys.stdout.write(report.to_tsv(args.condition))


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed propagated to every random step")
    common.add_argument("--threads", type=int, default=1, help="BLAS/OpenMP threads (default 1)")
    common.add_argument("--config", default=None, help="key=value config file")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="ivfactor", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=func)
        return sp

    sp = add("synth", cmd_synth, "generate a seeded synthetic corpus with train/eval archives and trials")
    sp.add_argument("--train-fraction", type=float, default=0.75)
    sp.add_argument("--out", required=True)

    sp = add("train-ubm", cmd_train_ubm, "train a GMM-UBM on a feature archive")
    sp.add_argument("--features", required=True)
    sp.add_argument("--C", type=int, default=64)
    sp.add_argument("--iters", type=int, default=None)
    sp.add_argument("--max-frames", type=int, default=None)
    sp.add_argument("--full", action="store_true", help="full covariances")
    sp.add_argument("--out", required=True)

    sp = add("stats", cmd_stats, "accumulate sufficient statistics")
    sp.add_argument("--ubm", required=True)
    sp.add_argument("--features", required=True)
    sp.add_argument("--out", required=True)

    sp = add("train-tv", cmd_train_tv, "train the generative extractor by EM")
    sp.add_argument("--ubm", required=True)
    sp.add_argument("--stats", required=True)
    sp.add_argument("--D", type=int, default=40)
    sp.add_argument("--iters", type=int, default=10)
    sp.add_argument("--out", required=True)

    sp = add("factorize", cmd_factorize, "eigen-initialize a factorized extractor")
    sp.add_argument("--extractor", required=True)
    sp.add_argument("--Q", type=int, required=True)
    sp.add_argument("--center", action="store_true")
    sp.add_argument("--out", required=True)

    sp = add("train-dix", cmd_train_dix, "discriminatively retrain an extractor")
    sp.add_argument("--scheme", choices=("1", "2", "full"), required=True)
    sp.add_argument("--extractor", required=True, help="generative extractor")
    sp.add_argument("--stats", required=True, help="speaker-labelled training statistics")
    sp.add_argument("--Q", type=int, default=None)
    sp.add_argument("--D", type=int, default=None)
    sp.add_argument("--out", required=True)

    sp = add("extract", cmd_extract, "extract i-vectors")
    sp.add_argument("--extractor", required=True)
    sp.add_argument("--ubm", default=None)
    sp.add_argument("--features", default=None)
    sp.add_argument("--stats", default=None)
    sp.add_argument("--out", required=True)

    sp = add("backend", cmd_backend, "fit LDA + length norm + PLDA")
    sp.add_argument("--ivectors", required=True)
    sp.add_argument("--D-lda", dest="D_lda", type=int, default=20)
    sp.add_argument("--no-length-norm", action="store_true")
    sp.add_argument("--iters", type=int, default=20)
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "score a trial list and compute the EER")
    sp.add_argument("--backend", required=True)
    sp.add_argument("--ivectors", required=True)
    sp.add_argument("--trials", required=True)
    sp.add_argument("--name", default=None, help="system name (default: output directory name)")
    sp.add_argument("--out", required=True)

    sp = add("report", cmd_report, "collect eval outputs into a TSV report with figures")
    sp.add_argument("--system", nargs=2, action="append", metavar=("NAME", "EVAL_DIR"), required=True)
    sp.add_argument("--extractor", nargs=2, action="append", metavar=("NAME", "PATH"))
    sp.add_argument("--trials", required=True)
    sp.add_argument("--condition", default="desk-synth")
    sp.add_argument("--out", required=True)

    sp = add("experiment", cmd_experiment, "run all six systems end to end and write the report")
    sp.add_argument("--Q", type=int, default=None)
    sp.add_argument("--D", type=int, default=None)
    sp.add_argument("--condition", default="desk-synth")
    sp.add_argument("--out", required=True)
    return p


def _fail(kind: str, message: str, code: int) -> int:
    msg = " ".join(str(message).split())
    sys.stderr.write(f"error\t{kind}\t{msg}\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    if args.threads < 1:
        return _fail("usage", "--threads must be >= 1", 2)
    try:
        with threadpool_limits(limits=args.threads):
            args.func(args)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    except FileNotFoundError as exc:
        return _fail("file_not_found", exc, 1)
    except fio.FormatError as exc:
        return _fail("format", exc, 1)
    except (ValueError, np.linalg.LinAlgError) as exc:
        return _fail("invalid", exc, 1)
    except OSError as exc:
        return _fail("io", exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
