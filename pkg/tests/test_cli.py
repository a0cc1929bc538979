import os
import subprocess
import sys
from pathlib import Path

import pytest

from ivfactor import io as fio
from ivfactor.cli import main

SYNTH = "n_speakers=30\nutts_per_speaker=6\nframes=60,100\nC=8\nF=4\nD_true=6\n"
TRAIN = "max_epochs=3\nn_cv=50\n"
REPO = Path(__file__).resolve().parents[1]


def run(*argv):
    return main([str(a) for a in argv])


def tree_bytes(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "synth.cfg").write_text(SYNTH)
    (d / "train.cfg").write_text(TRAIN)
    assert run("synth", "--config", d / "synth.cfg", "--seed", 3, "--out", d / "corpus") == 0
    assert run("train-ubm", "--features", d / "corpus/train", "--C", 8, "--iters", 5, "--seed", 3,
               "--out", d / "ubm.gubm") == 0
    for part in ("train", "eval"):
        assert run("stats", "--ubm", d / "ubm.gubm", "--features", d / f"corpus/{part}",
                   "--out", d / f"{part}.stat") == 0
    assert run("train-tv", "--ubm", d / "ubm.gubm", "--stats", d / "train.stat", "--D", 6, "--iters", 3,
               "--out", d / "B.ivex") == 0
    assert run("factorize", "--extractor", d / "B.ivex", "--Q", 3, "--out", d / "A_init.ivex") == 0
    assert run("train-dix", "--scheme", 2, "--extractor", d / "B.ivex", "--stats", d / "train.stat", "--Q", 3,
               "--D", 6, "--config", d / "train.cfg", "--seed", 3, "--out", d / "dix2") == 0
    for name, ext in (("B", d / "B.ivex"), ("R", d / "dix2/extractor.ivex")):
        assert run("extract", "--extractor", ext, "--stats", d / "train.stat", "--out", d / f"iv_{name}_train") == 0
        assert run("extract", "--extractor", ext, "--ubm", d / "ubm.gubm", "--features", d / "corpus/eval",
                   "--out", d / f"iv_{name}_eval") == 0
        assert run("backend", "--ivectors", d / f"iv_{name}_train", "--D-lda", 4, "--out", d / f"{name}.plda") == 0
        assert run("eval", "--backend", d / f"{name}.plda", "--ivectors", d / f"iv_{name}_eval",
                   "--trials", d / "corpus/trials.tsv", "--name", name, "--out", d / f"eval_{name}") == 0
    assert run("report", "--system", "B", d / "eval_B", "--system", "R", d / "eval_R",
               "--extractor", "B", d / "B.ivex", "--extractor", "R", d / "dix2/extractor.ivex",
               "--trials", d / "corpus/trials.tsv", "--out", d / "report") == 0
    return d


def test_pipeline_outputs(pipeline, capsys):
    d = pipeline
    for f in ("corpus/trials.tsv", "corpus/planted.ivex", "dix2/history.csv", "dix2/classifier.clsf",
              "eval_R/scores.tsv", "eval_R/det.png", "report/report.tsv", "report/det.png", "report/eer.png"):
        assert (d / f).is_file(), f
    rows = (d / "report/report.tsv").read_text().splitlines()
    assert rows[0] == "condition\tB\tR"
    assert rows[2] == f"n_params\t{8 * 4 * 6}\t{3 * 8 + 3 * 4 * 6}"
    # one score line per trial
    n_trials = len(fio.read_trials(d / "corpus/trials.tsv"))
    assert len(fio.read_scores(d / "eval_B/scores.tsv")) == n_trials


def test_eval_prints_eer(pipeline, capsys):
    d = pipeline
    assert run("eval", "--backend", d / "B.plda", "--ivectors", d / "iv_B_eval", "--trials",
               d / "corpus/trials.tsv", "--out", d / "eval_again") == 0
    name, key, val = capsys.readouterr().out.strip().split("\t")
    assert (name, key) == ("eval_again", "EER") and 0 <= float(val) <= 100


def test_stages_are_idempotent(pipeline, tmp_path):
    d = pipeline
    assert run("synth", "--config", d / "synth.cfg", "--seed", 3, "--out", tmp_path / "c") == 0
    assert tree_bytes(tmp_path / "c") == tree_bytes(d / "corpus")
    assert run("train-dix", "--scheme", 2, "--extractor", d / "B.ivex", "--stats", d / "train.stat", "--Q", 3,
               "--D", 6, "--config", d / "train.cfg", "--seed", 3, "--out", tmp_path / "dix") == 0
    a, b = tree_bytes(tmp_path / "dix"), tree_bytes(d / "dix2")
    a.pop("timing.tsv"), b.pop("timing.tsv")
    assert a == b


def test_missing_feature_file(pipeline, tmp_path, capsys):
    import shutil
    shutil.copytree(pipeline / "corpus/eval", tmp_path / "feats")
    victim = sorted((tmp_path / "feats").glob("*.feat"))[0]
    victim.unlink()
    code = run("stats", "--ubm", pipeline / "ubm.gubm", "--features", tmp_path / "feats", "--out", tmp_path / "s")
    err = capsys.readouterr().err
    assert code != 0 and victim.name in err
    assert err.startswith("error\tfile_not_found\t") and err.count("\n") == 1
    assert not (tmp_path / "s").exists()
    code = run("extract", "--extractor", pipeline / "B.ivex", "--ubm", pipeline / "ubm.gubm",
               "--features", tmp_path / "feats", "--out", tmp_path / "iv")
    assert code == 1 and victim.name in capsys.readouterr().err


def test_factorize_q_above_c(pipeline, tmp_path, capsys):
    code = run("factorize", "--extractor", pipeline / "B.ivex", "--Q", 9, "--out", tmp_path / "x.ivex")
    assert code == 1 and "Q must not exceed C" in capsys.readouterr().err


def test_usage_errors(capsys):
    assert run("train-ubm", "--bogus") == 2
    assert capsys.readouterr().err.startswith("error\tusage\t")
    assert run() == 2
    assert run("extract", "--extractor", "x", "--out", "y") == 2


def test_bad_format(tmp_path, capsys):
    (tmp_path / "fake.ivex").write_bytes(b"NOPE" + bytes(40))
    assert run("factorize", "--extractor", tmp_path / "fake.ivex", "--Q", 1, "--out", tmp_path / "o") == 1
    assert capsys.readouterr().err.startswith("error\tformat\t")


def test_data_root(pipeline, tmp_path, monkeypatch):
    monkeypatch.setenv("IVFACTOR_DATA_ROOT", str(pipeline))
    assert run("factorize", "--extractor", "B.ivex", "--Q", 2, "--out", tmp_path / "q2.ivex") == 0
    assert fio.load_extractor(tmp_path / "q2.ivex").Q == 2


@pytest.mark.slow
def test_shell_pipeline(tmp_path):
    (tmp_path / "synth.cfg").write_text(SYNTH)
    (tmp_path / "train.cfg").write_text(TRAIN)
    env = dict(os.environ, C="8", D="6", Q="3", D_LDA="4", UBM_FRAMES="5000",
               IVFACTOR=str(Path(sys.executable).parent / "ivfactor"))
    if not Path(env["IVFACTOR"]).exists():
        env["IVFACTOR"] = "ivfactor"
    proc = subprocess.run(["bash", str(REPO / "scripts/run_pipeline.sh"), str(tmp_path / "out"),
                           str(tmp_path / "synth.cfg"), str(tmp_path / "train.cfg")],
                          env=env, capture_output=True, text=True, timeout=600)
    assert proc.returncode == 0, proc.stderr
    header = (tmp_path / "out/report/report.tsv").read_text().splitlines()[0].split("\t")
    assert header == ["condition", "B", "A_init", "A", "R_init", "R", "F"]
    assert proc.stdout.splitlines()[-5].startswith("condition\t")
    assert (tmp_path / "out/report/det.png").is_file()
