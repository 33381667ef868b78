"""Interaural cue models: comb-filter IPD, ILD, Gaussian likelihoods, coherence prior."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from .acoustics import Brir
from .dsp import Spectrogram, wrap_phase
from .mixture import InterauralObservation

LOG_2PI = np.log(2.0 * np.pi)
UNDEFINED_EPS = 1e-12
VARIANCE_FLOOR = 1e-5


@dataclass(frozen=True)
class CombParams:
    """Direct sound + first reflection at both ears, relative to the left direct arrival.

    n_ds_s: right minus left direct arrival.
    n_df_s: left first reflection minus left direct arrival.
    n_st_s: right minus left first-reflection arrival.
    p01/p11: left direct/reflection amplitudes; p02/p12: the same for the right ear.
    """

    n_ds_s: float
    n_df_s: float = 0.0
    n_st_s: float = 0.0
    p01: float = 1.0
    p11: float = 0.0
    p02: float = 1.0
    p12: float = 0.0

    def __post_init__(self):
        if self.n_df_s < 0:
            raise ValueError("first reflection cannot precede the direct sound")
        if self.p01 == 0 or self.p02 == 0:
            raise ValueError("direct-sound amplitudes must be non-zero")

    @property
    def has_reflection(self) -> bool:
        return self.p11 != 0.0 or self.p12 != 0.0

    def direct_only(self) -> "CombParams":
        return CombParams(self.n_ds_s, self.n_df_s, self.n_st_s, 1.0, 0.0, 1.0, 0.0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CombParams":
        return cls(**{k: float(d[k]) for k in ("n_ds_s", "n_df_s", "n_st_s", "p01", "p11", "p02", "p12")
                      if k in d})


def comb_transfer(c: CombParams, freqs_hz) -> np.ndarray:
    """Complex interaural response (left over right) of the two-tap pair."""
    w = 2.0 * np.pi * np.asarray(freqs_hz, float)
    num = c.p01 + c.p11 * np.exp(-1j * w * c.n_df_s)
    den = c.p02 * np.exp(-1j * w * c.n_ds_s) + c.p12 * np.exp(-1j * w * (c.n_df_s + c.n_st_s))
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(np.abs(den) < UNDEFINED_EPS, np.nan, num / den)


def comb_ipd_model(c: CombParams, freqs_hz) -> np.ndarray:
    """Phase of the comb interaural response, wrapped; NaN where undefined."""
    h = comb_transfer(c, freqs_hz)
    out = np.full(h.shape, np.nan)
    ok = np.isfinite(h)
    out[ok] = wrap_phase(np.angle(h[ok]))
    return out


def phase_residual(obs: InterauralObservation, c: CombParams) -> np.ndarray:
    """Observed IPD minus the comb model, wrapped; NaN on bins where the model is undefined."""
    model = comb_ipd_model(c, obs.frequencies)
    return wrap_phase(obs.ipd_rad - model[None, :])


def dtft(h: np.ndarray, freqs_hz, sample_rate_hz: float) -> np.ndarray:
    """Evaluate the DTFT of a finite sequence at arbitrary frequencies."""
    h = np.asarray(h, float)
    freqs = np.asarray(freqs_hz, float)
    nz = np.flatnonzero(h)
    if nz.size == 0:
        return np.zeros(freqs.shape, complex)
    n = np.arange(nz[0], nz[-1] + 1)
    out = np.empty(freqs.shape, complex)
    for s in range(0, freqs.size, 128):
        f = freqs.ravel()[s:s + 128]
        out.ravel()[s:s + 128] = np.exp(-2j * np.pi * np.outer(f, n) / sample_rate_hz) @ h[n]
    return out


def ild_model(brir: Brir, freqs_hz) -> tuple[np.ndarray, np.ndarray]:
    """Level ratio (dB) of the rendered left/right IRs per frequency.

    Returns (ild_db, undefined) where ``undefined`` flags bins with a
    vanishing right-ear response (their ILD is set to 0).
    """
    ir = brir.render_array()
    h1 = dtft(ir[0], freqs_hz, brir.sample_rate_hz)
    h2 = dtft(ir[1], freqs_hz, brir.sample_rate_hz)
    undefined = np.abs(h2) < UNDEFINED_EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        ild = 20.0 * np.log10(np.abs(h1) / np.abs(h2))
    ild[undefined | ~np.isfinite(ild)] = 0.0
    return ild, undefined


@dataclass
class SourceCueModel:
    """Gaussian ILD per frequency and Gaussian IPD residual per (candidate, frequency).

    ``candidates`` holds the comb parameters of each grid point; the garbage
    model has none and a uniform IPD density.
    """

    ild_mean: np.ndarray
    ild_var: np.ndarray
    ipd_mean: np.ndarray | None = None
    ipd_var: np.ndarray | None = None
    candidates: tuple = ()
    is_garbage: bool = False

    @property
    def n_candidates(self) -> int:
        return 1 if self.is_garbage else len(self.candidates)

    def copy(self) -> "SourceCueModel":
        cp = lambda a: None if a is None else a.copy()
        return SourceCueModel(self.ild_mean.copy(), self.ild_var.copy(), cp(self.ipd_mean),
                              cp(self.ipd_var), self.candidates, self.is_garbage)


def gaussian_logpdf(x, mean, var):
    return -0.5 * (LOG_2PI + np.log(var)) - 0.5 * (x - mean) ** 2 / var


def cue_log_likelihood(obs: InterauralObservation, model: SourceCueModel, c_index: int = 0) -> np.ndarray:
    """log N(ILD) + log N(IPD residual) per bin; silent bins contribute 0."""
    ll = gaussian_logpdf(obs.ild_db, model.ild_mean[None, :], model.ild_var[None, :])
    if model.is_garbage:
        ll = ll - LOG_2PI
    else:
        resid = phase_residual(obs, model.candidates[c_index])
        resid = np.nan_to_num(resid, nan=0.0)
        ll = ll + gaussian_logpdf(resid, model.ipd_mean[c_index][None, :], model.ipd_var[c_index][None, :])
    if obs.active is not None:
        ll = np.where(obs.active, ll, 0.0)
    return ll


def garbage_model(freqs_hz, ild_var: float = 400.0) -> SourceCueModel:
    """Zero-mean wide ILD Gaussian with a fixed uniform IPD density."""
    n = np.asarray(freqs_hz).size
    return SourceCueModel(np.zeros(n), np.full(n, float(ild_var)), is_garbage=True)


@dataclass
class IcMask:
    """Interaural coherence prior; ``garbage_prior`` defaults to ``1 - gamma``."""

    gamma: np.ndarray
    kappa: float
    garbage_prior: np.ndarray | None = None

    def __post_init__(self):
        if self.garbage_prior is None:
            self.garbage_prior = 1.0 - self.gamma

    def dump(self, path) -> Path:
        return dump_matrix(self.gamma, path, {"kind": "interaural_coherence", "kappa": self.kappa})


def kappa_from_time_constant(tau_s: float, sample_rate_hz: float) -> float:
    """Smoothing factor 1 / (tau * fs), clipped into [0, 1]."""
    return float(min(1.0, 1.0 / (tau_s * sample_rate_hz)))


def _recursive_average(x: np.ndarray, kappa: float) -> np.ndarray:
    # Phi(m) = kappa Phi(m-1) + (1 - kappa) x(m), with Phi(-1) = x(0)
    zi = (kappa * x[0])[None, :]
    return signal.lfilter([1.0 - kappa], [1.0, -kappa], x, axis=0, zi=zi)[0]


def ic_mask(left_spec: Spectrogram, right_spec: Spectrogram, kappa: float = 0.5) -> IcMask:
    """Magnitude-squared coherence from recursively smoothed auto/cross spectra."""
    if not 0.0 <= kappa <= 1.0:
        raise ValueError("kappa must lie in [0, 1]")
    y1, y2 = left_spec.bins, right_spec.bins
    if y1.shape != y2.shape:
        raise ValueError("left/right spectrogram dimensions differ")
    # |y|^2 via y*conj(y) so identical channels give bit-identical auto and cross terms
    phi1 = _recursive_average((y1 * y1.conj()).real, kappa)
    phi2 = _recursive_average((y2 * y2.conj()).real, kappa)
    phi12 = _recursive_average(y1 * y2.conj(), kappa)
    denom = phi1 * phi2
    with np.errstate(divide="ignore", invalid="ignore"):
        gamma = (phi12.real ** 2 + phi12.imag ** 2) / denom
    gamma = np.where(denom > 0, gamma, 0.0)
    return IcMask(np.clip(gamma, 0.0, 1.0), float(kappa))


def dump_matrix(values: np.ndarray, path, header: dict) -> Path:
    """Flat row-major float32 matrix plus a JSON header next to it."""
    path = Path(path)
    values = np.ascontiguousarray(values, dtype="<f4")
    values.tofile(path)
    meta = dict(header, frames=int(values.shape[0]), bins=int(values.shape[1]), dtype="float32",
                order="row-major")
    header_path = path.with_suffix(path.suffix + ".json")
    header_path.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return header_path


def load_matrix(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    values = np.fromfile(path, dtype="<f4").reshape(meta["frames"], meta["bins"])
    return values, meta
