import math

import numpy as np
import pytest

from ivfactor.experiment import ExperimentConfig, SYSTEMS, evaluate_extractor, run_experiment, trial_masks, write_report
from ivfactor.gmm import accumulate_stats
from ivfactor.synth import SynthConfig, generate_corpus
from ivfactor.training import TrainConfig


def planted_eer(**kw):
    """EER with the generating UBM and planted extractor, so only the corpus varies."""
    base = dict(n_speakers=120, utts_per_speaker=4, frames=(150, 250), C=16, F=6, D_true=8, seed=3)
    base.update(kw)
    corpus = generate_corpus(SynthConfig(**base))
    train, test = corpus.split(0.5)
    tr = [accumulate_stats(corpus.ubm, u) for u in train]
    ev = [accumulate_stats(corpus.ubm, u) for u in test]
    return evaluate_extractor("planted", corpus.t_true, tr, ev, D_lda=6).eer.eer


def test_corpus_is_deterministic():
    cfg = SynthConfig(n_speakers=3, utts_per_speaker=2, frames=(10, 20), C=4, F=3, D_true=2)
    a, b = generate_corpus(cfg), generate_corpus(cfg)
    assert all(np.array_equal(x.frames, y.frames) for x, y in zip(a.utterances, b.utterances))
    assert np.array_equal(a.t_true.t_norm, b.t_true.t_norm)
    c = generate_corpus(SynthConfig(**{**cfg.__dict__, "seed": 1}))
    assert not np.array_equal(a.utterances[0].frames[:5], c.utterances[0].frames[:5])


def test_split_is_speaker_disjoint():
    corpus = generate_corpus(SynthConfig(n_speakers=8, utts_per_speaker=2, frames=(5, 5), C=2, F=2, D_true=2))
    train, test = corpus.split(0.75)
    assert len(train) == 12 and len(test) == 4
    assert not {u.speaker_id for u in train} & {u.speaker_id for u in test}


def test_synth_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(frames=(10, 5))
    with pytest.raises(ValueError):
        SynthConfig(speaker_scale=-1.0)
    with pytest.raises(ValueError):
        SynthConfig(residual_tilt=1.0)


def test_no_speaker_variability_is_chance():
    assert abs(planted_eer(speaker_scale=0.0, channel_scale=0.3) - 50.0) < 5.0


def test_large_speaker_variability_is_separable():
    assert planted_eer(speaker_scale=1.5, channel_scale=0.0, frames=(400, 600)) < 1.0


def test_trial_masks():
    tgt, non = trial_masks(["a", "a", "b"])
    assert tgt.sum() == 1 and non.sum() == 2
    assert not np.any(tgt & non) and not np.any(np.diag(tgt | non))


@pytest.mark.slow
def test_tiny_experiment_structure(tmp_path):
    cfg = ExperimentConfig(
        synth=SynthConfig(n_speakers=40, utts_per_speaker=6, frames=(100, 200), C=16, F=6, D_true=10),
        D=10, D_lda=5, Q=4, ubm_iters=5, ubm_max_frames=20000, tv_iters=3,
        train=TrainConfig(max_epochs=3, n_cv=50))
    report = run_experiment(cfg)
    assert list(report.systems) == list(SYSTEMS)
    assert all(math.isfinite(e) and 0 <= e <= 100 for e in report.eers().values())
    lines = report.to_tsv().splitlines()
    assert lines[0].split("\t") == ["condition", *SYSTEMS]
    assert len(lines[1].split("\t")) == 7
    p = {k: v.n_params for k, v in report.systems.items()}
    assert p["B"] == p["F"] == 16 * 6 * 10
    assert p["A"] == p["R"] == p["A_init"] == 4 * 16 + 4 * 6 * 10
    out = write_report(report, tmp_path / "rep")
    for name in ("report.tsv", "metrics.jsonl", "timing.tsv", "config.txt", "det.png", "eer.png", "training.png",
                 "history_R.csv", "models/ubm.gubm", "models/R.ivex", "models/F.plda", "models/A.clsf"):
        assert (out / name).is_file(), name
    assert (out / "det.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
