"""On-disk formats.  All binary payloads are little-endian.

Feature archive: a directory holding ``manifest.tsv`` (``utt_id<TAB>speaker_id<TAB>relative_path``)
and one file per utterance: 16-byte header ``"FEAT", u32 frames, u32 dim, u32 0`` followed by
float32 values, row-major.  i-vector archives use the same layout with magic ``"IVEC"`` and a
header ``"IVEC", u32 D, u32 count, u32 0``.

Model files start with a 4-byte magic and a u32 version:

    GUBM  C, F, flags(bit0 = full covariance); weights, means, covariances     (float64)
    IVEX  kind(0 full, 1 factorized), C, F, D, Q; blocks | bases, coeffs       (float64)
    STAT  U, C, F; ids; n, f, f_norm, total_frames                           (float64)
    PLDA  D, D_lda, flags(bit0 = length norm); mean, lda, plda mean, Sb, Sw   (float64)
    CLSF  K, D, flags(bit0 = bias); W, b                                     (float64)
"""
from __future__ import annotations

import os
import shutil
import struct
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .backend import Backend, PldaModel, PreprocessChain
from .extractor import Extractor, FactorizedExtractor, FullExtractor
from .gmm import FeatureMatrix, GmmUbm, SuffStats
from .training.objective import Classifier

VERSION = 1
MANIFEST = "manifest.tsv"
_ARCHIVE_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    pass


# -- atomic output -----------------------------------------------------------

def atomic_write(path, data: bytes | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_directory(path, fill) -> Path:
    """Build a directory in a temporary sibling via ``fill(tmpdir)``, then swap it in."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix=f".{path.name}."))
    try:
        fill(tmp)
        if path.exists():
            old = Path(tempfile.mkdtemp(dir=path.parent, prefix=f".{path.name}.old."))
            os.replace(path, old / "x")
            os.replace(tmp, path)
            shutil.rmtree(old)
        else:
            os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def _open_checked(path, magic: bytes) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"file not found: {path}")
    data = path.read_bytes()
    if data[:4] != magic:
        raise FormatError(f"{path}: expected magic {magic!r}, found {data[:4]!r}")
    return data


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        if self.pos + s.size > len(self.data):
            raise FormatError(f"{self.path}: truncated file")
        out = s.unpack_from(self.data, self.pos)
        self.pos += s.size
        return out

    def array(self, shape, dtype="<f8") -> np.ndarray:
        count = int(np.prod(shape))
        nbytes = count * np.dtype(dtype).itemsize
        if self.pos + nbytes > len(self.data):
            raise FormatError(f"{self.path}: truncated file")
        arr = np.frombuffer(self.data, dtype=dtype, count=count, offset=self.pos).reshape(shape)
        self.pos += nbytes
        return arr.astype(np.float64)

    def string(self) -> str:
        (n,) = self.unpack("H")
        s = self.data[self.pos:self.pos + n].decode("utf-8")
        self.pos += n
        return s


def _f8(*arrays) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)


def _str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


# -- feature / i-vector archives ---------------------------------------------

def _matrix_blob(magic: bytes, a: int, b: int, values: np.ndarray) -> bytes:
    return _ARCHIVE_HEADER.pack(magic, a, b, 0) + np.ascontiguousarray(values, dtype="<f4").tobytes()


def _safe_name(utt: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in utt)


def write_feature_archive(path, utterances: Sequence[FeatureMatrix]) -> Path:
    def fill(tmp: Path):
        lines = []
        for u in utterances:
            rel = _safe_name(u.utterance_id) + ".feat"
            (tmp / rel).write_bytes(_matrix_blob(b"FEAT", u.n_frames, u.dim, u.frames))
            lines.append(f"{u.utterance_id}\t{u.speaker_id or '-'}\t{rel}\n")
        (tmp / MANIFEST).write_text("".join(lines), encoding="utf-8")
    return atomic_directory(path, fill)


def read_manifest(path) -> list[tuple[str, str | None, Path]]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"file not found: {path}")
    out = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected utt_id<TAB>speaker_id<TAB>relative_path")
        utt, spk, rel = parts
        out.append((utt, None if spk in ("", "-") else spk, path.parent / rel))
    return out


def read_feature_file(path) -> np.ndarray:
    data = _open_checked(path, b"FEAT")
    _, T, F, _ = _ARCHIVE_HEADER.unpack_from(data)
    return _Reader(data[16:], path).array((T, F), "<f4")


def read_feature_archive(path) -> list[FeatureMatrix]:
    return [FeatureMatrix(read_feature_file(p), utt, spk) for utt, spk, p in read_manifest(path)]


def check_feature_archive(path) -> None:
    """Fail early, naming the first missing file."""
    for _, _, p in read_manifest(path):
        if not p.is_file():
            raise FileNotFoundError(f"file not found: {p}")


def write_ivector_archive(path, ids: Sequence[str], speakers: Sequence, vectors: np.ndarray) -> Path:
    vectors = np.atleast_2d(vectors)

    def fill(tmp: Path):
        lines = []
        for utt, spk, vec in zip(ids, speakers, vectors):
            rel = _safe_name(utt) + ".ivec"
            (tmp / rel).write_bytes(_matrix_blob(b"IVEC", len(vec), 1, vec))
            lines.append(f"{utt}\t{spk or '-'}\t{rel}\n")
        (tmp / MANIFEST).write_text("".join(lines), encoding="utf-8")
    return atomic_directory(path, fill)


def read_ivector_archive(path) -> tuple[list, list, np.ndarray]:
    ids, spks, vecs = [], [], []
    for utt, spk, p in read_manifest(path):
        data = _open_checked(p, b"IVEC")
        _, D, count, _ = _ARCHIVE_HEADER.unpack_from(data)
        vecs.append(_Reader(data[16:], p).array((count, D), "<f4"))
        ids.extend([utt] * count)
        spks.extend([spk] * count)
    return ids, spks, np.concatenate(vecs) if vecs else np.zeros((0, 0))


# -- models ------------------------------------------------------------------

def ubm_bytes(ubm: GmmUbm) -> bytes:
    head = struct.pack("<4sIIII", b"GUBM", VERSION, ubm.n_components, ubm.dim, int(ubm.full))
    return head + _f8(ubm.weights, ubm.means, ubm.covariances)


def save_ubm(path, ubm: GmmUbm) -> Path:
    return atomic_write(path, ubm_bytes(ubm))


def load_ubm(path) -> GmmUbm:
    r = _Reader(_open_checked(path, b"GUBM"), path)
    _, version, C, F, flags = r.unpack("4sIIII")
    full = bool(flags & 1)
    w = r.array((C,))
    m = r.array((C, F))
    cov = r.array((C, F, F) if full else (C, F))
    return GmmUbm(w, m, cov, full=full)


def extractor_bytes(ext: Extractor) -> bytes:
    if isinstance(ext, FactorizedExtractor):
        head = struct.pack("<4sIIIIII", b"IVEX", VERSION, 1, ext.C, ext.F, ext.D, ext.Q)
        return head + _f8(ext.bases, ext.coeffs)
    head = struct.pack("<4sIIIIII", b"IVEX", VERSION, 0, ext.C, ext.F, ext.D, 0)
    return head + _f8(ext.t_norm)


def save_extractor(path, ext: Extractor) -> Path:
    return atomic_write(path, extractor_bytes(ext))


def load_extractor(path) -> Extractor:
    r = _Reader(_open_checked(path, b"IVEX"), path)
    _, version, kind, C, F, D, Q = r.unpack("4sIIIIII")
    if kind == 1:
        bases = r.array((Q, F, D))
        return FactorizedExtractor(bases, r.array((C, Q)))
    if kind == 0:
        return FullExtractor(r.array((C, F, D)))
    raise FormatError(f"{path}: unknown extractor kind {kind}")


def save_stats(path, stats: Sequence[SuffStats]) -> Path:
    C, F = stats[0].f.shape
    parts = [struct.pack("<4sIIII", b"STAT", VERSION, len(stats), C, F)]
    parts += [_str(s.utterance_id) + _str(s.speaker_id or "") for s in stats]
    parts.append(_f8(np.stack([s.n for s in stats]), np.stack([s.f for s in stats]),
                     np.stack([s.f_norm for s in stats]), np.array([s.total_frames for s in stats])))
    return atomic_write(path, b"".join(parts))


def load_stats(path) -> list[SuffStats]:
    r = _Reader(_open_checked(path, b"STAT"), path)
    _, version, U, C, F = r.unpack("4sIIII")
    ids = [(r.string(), r.string()) for _ in range(U)]
    n, f, fn, tot = r.array((U, C)), r.array((U, C, F)), r.array((U, C, F)), r.array((U,))
    return [SuffStats(n[i], f[i], fn[i], float(tot[i]), utt, spk or None) for i, (utt, spk) in enumerate(ids)]


def backend_bytes(backend: Backend) -> bytes:
    ch, pl = backend.chain, backend.plda
    D, Dl = ch.lda.shape
    head = struct.pack("<4sIIII", b"PLDA", VERSION, D, Dl, int(ch.length_norm))
    return head + _f8(ch.mean, ch.lda, pl.mean, pl.between, pl.within)


def save_backend(path, backend: Backend) -> Path:
    return atomic_write(path, backend_bytes(backend))


def load_backend(path) -> Backend:
    r = _Reader(_open_checked(path, b"PLDA"), path)
    _, version, D, Dl, flags = r.unpack("4sIIII")
    chain = PreprocessChain(r.array((D,)), r.array((D, Dl)), bool(flags & 1))
    return Backend(chain, PldaModel(r.array((Dl,)), r.array((Dl, Dl)), r.array((Dl, Dl))))


def save_classifier(path, clf: Classifier) -> Path:
    head = struct.pack("<4sIIII", b"CLSF", VERSION, clf.K, clf.W.shape[1], int(clf.use_bias))
    return atomic_write(path, head + _f8(clf.W, clf.b))


def load_classifier(path) -> Classifier:
    r = _Reader(_open_checked(path, b"CLSF"), path)
    _, version, K, D, flags = r.unpack("4sIIII")
    return Classifier(r.array((K, D)), r.array((K,)), bool(flags & 1))


# -- trials and scores -------------------------------------------------------

TRIAL_LABELS = ("target", "nontarget", "unk")


def read_trials(path) -> list[tuple[str, str, str]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"file not found: {path}")
    out = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[2] not in TRIAL_LABELS:
            raise FormatError(f"{path}:{lineno}: expected enroll_id<TAB>test_id<TAB>target|nontarget|unk")
        out.append(tuple(parts))
    return out


def trials_text(trials: Iterable[tuple[str, str, str]]) -> str:
    return "".join(f"{e}\t{t}\t{lab}\n" for e, t, lab in trials)


def scores_text(rows: Iterable[tuple[str, str, float]]) -> str:
    return "".join(f"{e}\t{t}\t{s:.6f}\n" for e, t, s in rows)


def read_scores(path) -> list[tuple[str, str, float]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"file not found: {path}")
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            e, t, s = line.split("\t")
            out.append((e, t, float(s)))
    return out
