"""Time-frequency analysis/synthesis, phase arithmetic and WAV I/O."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

WINDOW_KINDS = ("sqrt-hann", "hann", "hamming")


@dataclass(frozen=True)
class Waveform:
    """A single uniformly sampled audio channel."""

    samples: np.ndarray
    sample_rate_hz: float

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim != 1 or samples.size < 1:
            raise ValueError("waveform must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        if not self.sample_rate_hz > 0:
            raise ValueError("sample rate must be positive")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class StftParams:
    window_len: int = 1024
    hop: int = 256
    window_kind: str = "sqrt-hann"
    fft_len: int | None = None

    def __post_init__(self):
        if self.fft_len is None:
            object.__setattr__(self, "fft_len", self.window_len)
        if self.window_kind not in WINDOW_KINDS:
            raise ValueError(f"unknown window kind {self.window_kind!r}")
        if self.window_len < 1 or self.hop < 1:
            raise ValueError("window_len and hop must be positive")
        if self.hop > self.window_len:
            raise ValueError("hop must not exceed window_len")
        if self.fft_len < self.window_len:
            raise ValueError("fft_len must be >= window_len")

    @property
    def n_bins(self) -> int:
        return self.fft_len // 2 + 1

    @property
    def pad(self) -> int:
        return self.window_len - self.hop

    def analysis_window(self) -> np.ndarray:
        n = self.window_len
        if self.window_kind == "hamming":
            return np.hamming(n + 1)[:-1]
        hann = np.hanning(n + 1)[:-1]
        return np.sqrt(hann) if self.window_kind == "sqrt-hann" else hann

    def synthesis_window(self) -> np.ndarray:
        if self.window_kind == "sqrt-hann":
            return self.analysis_window()
        return np.ones(self.window_len)

    def frequencies(self, sample_rate_hz: float) -> np.ndarray:
        return np.fft.rfftfreq(self.fft_len, 1.0 / sample_rate_hz)

    def n_frames(self, length: int) -> int:
        padded = length + 2 * self.pad
        return 1 + int(np.ceil((padded - self.window_len) / self.hop))

    def to_dict(self) -> dict:
        return {"window_len": self.window_len, "hop": self.hop,
                "window_kind": self.window_kind, "fft_len": self.fft_len}


@dataclass(frozen=True)
class Spectrogram:
    """One-sided STFT, ``bins[m, k]`` is frame m, frequency bin k."""

    bins: np.ndarray
    params: StftParams
    sample_rate_hz: float
    length: int = field(default=0)

    @property
    def n_frames(self) -> int:
        return self.bins.shape[0]

    @property
    def n_bins(self) -> int:
        return self.bins.shape[1]

    @property
    def frequencies(self) -> np.ndarray:
        return self.params.frequencies(self.sample_rate_hz)

    def with_bins(self, bins: np.ndarray) -> "Spectrogram":
        if bins.shape != self.bins.shape:
            raise ValueError(f"shape mismatch: {bins.shape} vs {self.bins.shape}")
        return Spectrogram(bins, self.params, self.sample_rate_hz, self.length)


def _as_array(wave) -> tuple[np.ndarray, float | None]:
    if isinstance(wave, Waveform):
        return wave.samples, wave.sample_rate_hz
    return np.asarray(wave, dtype=float), None


def _frame(x: np.ndarray, params: StftParams) -> np.ndarray:
    n_frames = params.n_frames(x.size)
    total = (n_frames - 1) * params.hop + params.window_len
    padded = np.zeros(total)
    padded[params.pad:params.pad + x.size] = x
    view = np.lib.stride_tricks.sliding_window_view(padded, params.window_len)
    return view[::params.hop][:n_frames]


def stft(wave, params: StftParams = StftParams(), sample_rate_hz: float | None = None) -> Spectrogram:
    """Zero-padded one-sided STFT.

    ``window_len - hop`` zeros are prepended so that every input sample is
    covered by the full ``window_len / hop`` frames; the tail is padded up to
    the next whole frame.
    """
    x, fs = _as_array(wave)
    fs = fs if fs is not None else sample_rate_hz
    if fs is None:
        raise ValueError("sample rate required for raw arrays")
    if x.ndim != 1:
        raise ValueError("stft expects a single channel")
    if x.size < params.window_len:
        raise ValueError("input too short")
    frames = _frame(x, params) * params.analysis_window()
    bins = np.fft.rfft(frames, n=params.fft_len, axis=1)
    return Spectrogram(bins, params, float(fs), x.size)


def cola_gain(params: StftParams) -> float:
    """Constant overlap-add sum of analysis*synthesis windows.

    Raises ``ValueError`` if the window pair is not COLA at ``params.hop``.
    """
    prod = params.analysis_window() * params.synthesis_window()
    w, h = params.window_len, params.hop
    acc = np.zeros(h)
    for start in range(0, w, h):
        seg = prod[start:start + h]
        acc[:seg.size] += seg
    if w % h:
        raise ValueError(f"window {params.window_kind}/{w} is not COLA at hop {h}")
    gain = acc.mean()
    if gain <= 0 or np.max(np.abs(acc - gain)) > 1e-10 * gain:
        raise ValueError(f"window {params.window_kind}/{w} is not COLA at hop {h}")
    return float(gain)


def istft(spec: Spectrogram) -> Waveform:
    """Weighted overlap-add inverse of :func:`stft`, trimmed to the source length."""
    params = spec.params
    gain = cola_gain(params)
    frames = np.fft.irfft(spec.bins, n=params.fft_len, axis=1)[:, :params.window_len]
    frames = frames * params.synthesis_window()
    n_frames = frames.shape[0]
    total = (n_frames - 1) * params.hop + params.window_len
    out = np.zeros(total)
    for m in range(n_frames):
        out[m * params.hop:m * params.hop + params.window_len] += frames[m]
    length = spec.length or total - 2 * params.pad
    out = out[params.pad:params.pad + length] / gain
    if out.size < length:
        out = np.pad(out, (0, length - out.size))
    return Waveform(out, spec.sample_rate_hz)


def wrap_phase(x):
    """Wrap radians into the half-open interval [-pi, pi)."""
    wrapped = np.mod(np.asarray(x, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    # np.mod can round up to exactly 2*pi for tiny negative inputs
    wrapped = np.where(wrapped >= np.pi, wrapped - 2.0 * np.pi, wrapped)
    return wrapped if wrapped.ndim else float(wrapped)


def read_wav(path) -> tuple[list[Waveform], float]:
    """Read a PCM16 or float32 WAV; returns one Waveform per channel."""
    fs, data = wavfile.read(Path(path))
    if data.dtype == np.int16:
        data = data.astype(float) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(float) / 2147483648.0
    elif data.dtype.kind == "f":
        data = data.astype(float)
    else:
        raise ValueError(f"unsupported WAV sample format {data.dtype}")
    if data.ndim == 1:
        data = data[:, None]
    return [Waveform(data[:, c], float(fs)) for c in range(data.shape[1])], float(fs)


def write_wav(path, channels, sample_rate_hz: float, fmt: str = "float32") -> None:
    """Write channels (Waveforms or arrays of equal length) as interleaved WAV."""
    arrays = [c.samples if isinstance(c, Waveform) else np.asarray(c, float) for c in channels]
    n = max(a.size for a in arrays)
    data = np.zeros((n, len(arrays)))
    for i, a in enumerate(arrays):
        data[:a.size, i] = a
    if fmt == "pcm16":
        out = np.clip(np.round(data * 32768.0), -32768, 32767).astype("<i2")
    elif fmt == "float32":
        out = data.astype("<f4")
    else:
        raise ValueError(f"unknown WAV format {fmt!r}")
    if out.shape[1] == 1:
        out = out[:, 0]
    wavfile.write(Path(path), int(round(sample_rate_hz)), out)
