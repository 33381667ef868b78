"""Seeded speech-like test signals and utterance pool loading."""

from __future__ import annotations

import numpy as np
from scipy import signal

from .dsp import Waveform, read_wav

# rough vowel formants (Hz)
_FORMANTS = np.array([[730, 1090, 2440], [270, 2290, 3010], [530, 1840, 2480],
                      [570, 840, 2410], [300, 870, 2240], [660, 1720, 2410]], float)


def _formant_filter(x: np.ndarray, formants, fs: float) -> np.ndarray:
    y = np.zeros_like(x)
    for f, gain in zip(formants, (1.0, 0.5, 0.25)):
        if f >= fs / 2:
            continue
        b, a = signal.iirpeak(f, Q=f / 90.0, fs=fs)
        y += gain * signal.lfilter(b, a, x)
    return y


def synthetic_utterance(seed: int, duration_s: float = 3.0, sample_rate_hz: float = 16000.0) -> Waveform:
    """Harmonic syllables with AM envelopes, fricative noise bursts and pauses."""
    rng = np.random.default_rng(seed)
    fs = sample_rate_hz
    n = int(round(duration_s * fs))
    out = np.zeros(n)
    f0_base = rng.uniform(90.0, 220.0)
    pos = int(rng.uniform(0.02, 0.1) * fs)
    while pos < n:
        if rng.random() < 0.25:
            # fricative
            length = int(rng.uniform(0.05, 0.12) * fs)
            seg = rng.standard_normal(length)
            b, a = signal.butter(2, [min(2500.0, fs / 2 - 100), min(6000.0, fs / 2 - 50)], "bandpass", fs=fs)
            seg = 0.3 * signal.lfilter(b, a, seg)
        else:
            length = int(rng.uniform(0.12, 0.3) * fs)
            t = np.arange(length) / fs
            f0 = f0_base * (1.0 + 0.1 * rng.uniform(-1, 1) + 0.08 * np.sin(2 * np.pi * rng.uniform(1, 4) * t))
            phase = 2 * np.pi * np.cumsum(f0) / fs
            n_harm = int(min(30, (fs / 2 - 100) / f0.max()))
            src = sum(np.cos(k * phase) / k for k in range(1, n_harm + 1))
            seg = _formant_filter(src, _FORMANTS[rng.integers(len(_FORMANTS))], fs)
        env = np.sin(np.pi * np.arange(length) / length) ** 2
        am = 1.0 + 0.3 * np.sin(2 * np.pi * rng.uniform(3, 6) * np.arange(length) / fs)
        end = min(n, pos + length)
        out[pos:end] += (seg * env * am)[:end - pos]
        pos = end + int(rng.uniform(0.02, 0.15) * fs)
    out /= np.sqrt(np.mean(out ** 2))
    return Waveform(out, fs)


def fit_length(wave: Waveform, duration_s: float = 3.0) -> Waveform:
    """Trim or zero-pad to ``duration_s``."""
    n = int(round(duration_s * wave.sample_rate_hz))
    x = wave.samples[:n]
    return Waveform(np.pad(x, (0, n - x.size)), wave.sample_rate_hz)


def load_utterance(path, duration_s: float = 3.0, sample_rate_hz: float | None = None) -> Waveform:
    chans, fs = read_wav(path)
    if sample_rate_hz is not None and fs != sample_rate_hz:
        raise ValueError(f"{path}: sample rate {fs} Hz, expected {sample_rate_hz} Hz")
    return fit_length(chans[0], duration_s)
