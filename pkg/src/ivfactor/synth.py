"""Seeded synthetic corpora drawn from a planted total-variability model.

Each utterance u of speaker s gets a latent w_u = y_s + x_u (speaker factor
plus channel factor).  Frames are drawn from a GMM whose component means
are shifted by S_c^(1/2) Tbar_c w_u, where the planted normalized blocks
Tbar_c are built from a few shared basis matrices plus a small
component-specific residual, so the block stack has a decaying spectrum.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .extractor import FullExtractor
from .gmm import FeatureMatrix, GmmUbm


@dataclass(frozen=True)
class SynthConfig:
    n_speakers: int = 800
    utts_per_speaker: int = 6
    frames: tuple = (300, 600)
    C: int = 64
    F: int = 12
    D_true: int = 40
    speaker_scale: float = 0.2
    channel_scale: float = 0.25
    block_rank: int = 8
    block_decay: float = 0.8
    block_residual: float = 0.3
    residual_tilt: float = 0.6
    mean_spread: float = 2.0
    seed: int = 42

    def __post_init__(self):
        for name in ("n_speakers", "utts_per_speaker", "C", "F", "D_true", "block_rank"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        lo, hi = self.frames
        if not 1 <= lo <= hi:
            raise ValueError("frames must be a (min, max) range with 1 <= min <= max")
        if self.speaker_scale < 0 or self.channel_scale < 0:
            raise ValueError("scales must be non-negative")
        if not 0.0 <= self.residual_tilt < 1.0:
            raise ValueError("residual_tilt must lie in [0, 1)")


@dataclass
class Corpus:
    utterances: list          # FeatureMatrix, speaker_id set
    ubm: GmmUbm               # generating mixture
    t_true: FullExtractor     # planted normalized blocks
    config: SynthConfig

    def speakers(self) -> list:
        return sorted({u.speaker_id for u in self.utterances})

    def split(self, train_fraction: float = 0.75):
        """Speaker-disjoint (train, eval) partition; the first speakers go to training."""
        spk = self.speakers()
        n_train = int(round(train_fraction * len(spk)))
        train_spk = set(spk[:n_train])
        train = [u for u in self.utterances if u.speaker_id in train_spk]
        test = [u for u in self.utterances if u.speaker_id not in train_spk]
        return train, test


def planted_blocks(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    C, F, D = cfg.C, cfg.F, cfg.D_true
    R = min(cfg.block_rank, C)
    bases = rng.standard_normal((R, F, D))
    weights = cfg.block_decay ** np.arange(R)
    coeffs = rng.standard_normal((C, R)) * weights
    # tilt > 0 moves the shared structure toward the trailing (channel-heavy)
    # latent directions and the component-specific residual toward the
    # leading (speaker-heavy) ones
    ramp = np.linspace(-cfg.residual_tilt, cfg.residual_tilt, D)
    blocks = np.tensordot(coeffs, bases, axes=1) * (1.0 + ramp)
    blocks += cfg.block_residual * rng.standard_normal((C, F, D)) * (1.0 - ramp)
    # unit shift variance per supervector coordinate for a unit latent
    scale = np.sqrt(np.mean(np.sum(blocks ** 2, axis=2)))
    return blocks / scale


def generate_corpus(cfg: Optional[SynthConfig] = None) -> Corpus:
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(cfg.seed)
    C, F, D = cfg.C, cfg.F, cfg.D_true
    weights = rng.dirichlet(np.full(C, 20.0))
    means = cfg.mean_spread * rng.standard_normal((C, F))
    variances = rng.uniform(0.5, 1.5, size=(C, F))
    ubm = GmmUbm(weights / weights.sum(), means, variances)
    t_true = planted_blocks(cfg, rng)
    sd = np.sqrt(variances)
    # speaker energy concentrated in the leading latent directions, channel in the trailing ones
    spk_profile = np.linspace(1.5, 0.5, D)
    chn_profile = np.linspace(0.5, 1.5, D)

    utts = []
    for s in range(cfg.n_speakers):
        y = cfg.speaker_scale * spk_profile * rng.standard_normal(D)
        for j in range(cfg.utts_per_speaker):
            x = cfg.channel_scale * chn_profile * rng.standard_normal(D)
            shift = sd * (t_true @ (y + x))           # (C, F)
            T = int(rng.integers(cfg.frames[0], cfg.frames[1] + 1))
            comp = rng.choice(C, size=T, p=ubm.weights)
            frames = means[comp] + shift[comp] + sd[comp] * rng.standard_normal((T, F))
            utts.append(FeatureMatrix(frames, f"spk{s:04d}-utt{j:02d}", f"spk{s:04d}"))
    return Corpus(utts, ubm, FullExtractor(t_true), cfg)
