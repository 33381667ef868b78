"""Reverberant two-ear mixtures and interaural observations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from .acoustics import Brir
from .dsp import Spectrogram, Waveform, wrap_phase

SILENCE_EPS = 1e-12


@dataclass
class MixtureScene:
    """Sources as (utterance, BRIR) pairs; gains put source 0 ``tir_db`` above the rest."""

    sources: list
    tir_db: float = 0.0
    snr_db: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.sources:
            raise ValueError("a scene needs at least one source")
        rates = {float(u.sample_rate_hz) for u, _ in self.sources}
        rates |= {float(b.sample_rate_hz) for _, b in self.sources}
        if len(rates) != 1:
            raise ValueError(f"sample-rate mismatch: {sorted(rates)}")

    @property
    def sample_rate_hz(self) -> float:
        return float(self.sources[0][0].sample_rate_hz)

    def gains(self) -> np.ndarray:
        n = len(self.sources)
        if n == 1:
            return np.ones(1)
        rest = 10.0 ** (-self.tir_db / 20.0) / np.sqrt(n - 1)
        return np.concatenate([[1.0], np.full(n - 1, rest)])


@dataclass
class InterauralObservation:
    ild_db: np.ndarray
    ipd_rad: np.ndarray
    left_spec: Spectrogram
    right_spec: Spectrogram
    active: np.ndarray = field(default=None)  # False on silent bins

    @property
    def shape(self) -> tuple:
        return self.ild_db.shape

    @property
    def frequencies(self) -> np.ndarray:
        return self.left_spec.frequencies


def rms_normalize(wave: Waveform) -> Waveform:
    x = wave.samples
    rms = np.sqrt(np.mean(x * x))
    if rms == 0.0:
        raise ValueError("cannot normalise a silent signal")
    return Waveform(x / rms, wave.sample_rate_hz)


def render_images(scene: MixtureScene) -> np.ndarray:
    """Per-source two-ear images, shape (L, 2, n), all zero-padded to one length."""
    parts = []
    for gain, (utt, brir) in zip(scene.gains(), scene.sources):
        x = gain * rms_normalize(utt).samples
        ir = brir.render_array()
        parts.append([signal.convolve(x, ir[e]) for e in range(2)])
    n = max(p[0].size for p in parts)
    images = np.zeros((len(parts), 2, n))
    for l, (a, b) in enumerate(parts):
        images[l, 0, :a.size] = a
        images[l, 1, :b.size] = b
    return images


def render_mixture(scene: MixtureScene, images: np.ndarray | None = None) -> tuple[Waveform, Waveform]:
    """Sum of source images plus optional white sensor noise at ``snr_db``."""
    if images is None:
        images = render_images(scene)
    mix = images.sum(axis=0)
    if scene.snr_db is not None:
        rng = np.random.default_rng(scene.seed)
        power = np.mean(mix ** 2)
        mix = mix + rng.standard_normal(mix.shape) * np.sqrt(power * 10.0 ** (-scene.snr_db / 10.0))
    fs = scene.sample_rate_hz
    return Waveform(mix[0], fs), Waveform(mix[1], fs)


def interaural_spectrogram(left_spec: Spectrogram, right_spec: Spectrogram) -> InterauralObservation:
    """ILD (dB) and wrapped IPD of left over right, with silent bins flagged."""
    if left_spec.bins.shape != right_spec.bins.shape:
        raise ValueError("left/right spectrogram dimensions differ")
    y1, y2 = left_spec.bins, right_spec.bins
    m1, m2 = np.abs(y1), np.abs(y2)
    active = (m1 >= SILENCE_EPS) & (m2 >= SILENCE_EPS)
    with np.errstate(divide="ignore", invalid="ignore"):
        ild = np.where(active, 20.0 * np.log10(np.where(active, m1, 1.0) / np.where(active, m2, 1.0)), 0.0)
    ipd = np.where(active, wrap_phase(np.angle(y1) - np.angle(y2)), 0.0)
    return InterauralObservation(ild, ipd, left_spec, right_spec, active)
