"""Source and first-image localization from array RIRs, and EM initialization.

TOAs come from peak picking, azimuths from a delay-and-sum steered response,
and the elevation magnitude from the horizontal slowness of the TOA pattern
across the (planar) array.  Planar arrays cannot tell up from down; image
sources are placed below the array plane, as for floor reflections.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .acoustics import SPEED_OF_SOUND, ArraySpec, Brir, HeadGeometry, RoomSpec, synthesize_brir
from .dsp import Waveform
from .models import CombParams, ild_model

MIN_REFLECTION_LAG_S = 0.005
MAX_REFLECTION_LAG_S = 0.040
PEAK_SNR = 5.0  # reflection peak over robust local noise level
NOISE_HALF_WINDOW = 64
PEAK_GUARD = 4
LOW_CONFIDENCE_DB = 1.0


def _parabolic(y: np.ndarray, k: int) -> float:
    if k <= 0 or k >= y.size - 1:
        return float(k)
    a, b, c = y[k - 1], y[k], y[k + 1]
    den = a - 2.0 * b + c
    return float(k) if den == 0 else k + 0.5 * (a - c) / den


def _local_maxima(y: np.ndarray) -> np.ndarray:
    inner = (y[1:-1] >= y[:-2]) & (y[1:-1] > y[2:])
    return np.flatnonzero(inner) + 1


def _robust_sigma(y: np.ndarray, k: int) -> float:
    lo, hi = max(0, k - NOISE_HALF_WINDOW), min(y.size, k + NOISE_HALF_WINDOW + 1)
    idx = np.arange(lo, hi)
    idx = idx[np.abs(idx - k) > PEAK_GUARD]
    if idx.size == 0:
        return 0.0
    return float(1.4826 * np.median(np.abs(y[idx])))


def estimate_toas(rirs, sample_rate_hz: float | None = None) -> np.ndarray:
    """Direct and first-reflection TOAs (seconds) per channel, shape (M, 2)."""
    out = []
    for rir in rirs:
        h = rir.samples if isinstance(rir, Waveform) else np.asarray(rir, float)
        fs = rir.sample_rate_hz if isinstance(rir, Waveform) else sample_rate_hz
        if fs is None:
            raise ValueError("sample rate required for raw arrays")
        mag = np.abs(h)
        peak = mag.max()
        if peak <= 0:
            raise ValueError("impulse response is all zero")
        maxima = _local_maxima(mag)
        strong = maxima[mag[maxima] > 0.5 * peak]
        k0 = int(strong[0]) if strong.size else int(np.argmax(mag))
        t0 = _parabolic(mag, k0)
        lo = int(np.floor(t0 + MIN_REFLECTION_LAG_S * fs)) + 1
        hi = min(mag.size - 1, int(np.floor(t0 + MAX_REFLECTION_LAG_S * fs)))
        cands = maxima[(maxima >= lo) & (maxima <= hi)]
        if cands.size == 0:
            raise ValueError("no specular reflection found")
        k1 = int(cands[np.argmax(mag[cands])])
        if mag[k1] <= 0 or mag[k1] <= PEAK_SNR * _robust_sigma(h, k1):
            raise ValueError("no specular reflection found")
        out.append((t0 / fs, _parabolic(mag, k1) / fs))
    return np.array(out)


@dataclass
class DoaEstimate:
    azimuth_rad: float
    spread_db: float
    low_confidence: bool


def steered_response(segments: np.ndarray, array: ArraySpec, sample_rate_hz: float,
                     azimuths_rad: np.ndarray, elevation_rad: float = 0.0) -> np.ndarray:
    """Delay-and-sum output power per steering azimuth (plane waves)."""
    n = segments.shape[1]
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    spec = np.fft.rfft(segments, nfft, axis=1)
    freqs = np.fft.rfftfreq(nfft, 1.0 / sample_rate_hz)
    rel = array.positions - np.asarray(array.reference, float)
    u = np.stack([np.cos(azimuths_rad) * np.cos(elevation_rad), np.sin(azimuths_rad) * np.cos(elevation_rad),
                  np.full(azimuths_rad.shape, np.sin(elevation_rad))], 1)
    # a plane wave from u reaches mic m earlier by (r_m . u) / c
    tau = -(u @ rel.T) / SPEED_OF_SOUND
    power = np.empty(azimuths_rad.size)
    for i in range(azimuths_rad.size):
        steer = np.exp(2j * np.pi * freqs[None, :] * tau[i][:, None])
        power[i] = np.sum(np.abs(np.sum(spec * steer, axis=0)) ** 2)
    return power


def das_doa(rirs, array: ArraySpec, window_s: tuple, sample_rate_hz: float | None = None,
            elevation_rad: float = 0.0) -> DoaEstimate:
    """Azimuth maximizing the steered response over a 1 degree grid, refined parabolically."""
    if array.n_mics < 2:
        raise ValueError("need at least two microphones")
    data = np.stack([r.samples if isinstance(r, Waveform) else np.asarray(r, float) for r in rirs])
    fs = rirs[0].sample_rate_hz if isinstance(rirs[0], Waveform) else sample_rate_hz
    lo = max(0, int(np.floor(window_s[0] * fs)))
    hi = min(data.shape[1], int(np.ceil(window_s[1] * fs)) + 1)
    if hi <= lo:
        raise ValueError("empty analysis window")
    seg = data[:, lo:hi] * np.hanning(hi - lo + 2)[1:-1]
    grid = np.deg2rad(np.arange(360.0))
    power = steered_response(seg, array, fs, grid, elevation_rad)
    db = 10.0 * np.log10(np.maximum(power, 1e-300))
    k = int(np.argmax(db))
    a, b, c = db[k - 1], db[k], db[(k + 1) % 360]
    den = a - 2.0 * b + c
    frac = 0.0 if den == 0 else 0.5 * (a - c) / den
    az = np.deg2rad(k + frac)
    az = float(np.angle(np.exp(1j * az)))
    spread = float(db.max() - db.min())
    return DoaEstimate(az, spread, spread < LOW_CONFIDENCE_DB)


def _elevation_from_toas(toas: np.ndarray, array: ArraySpec) -> float:
    """|elevation| from the horizontal slowness of a planar TOA pattern."""
    rel = array.positions - np.asarray(array.reference, float)
    a = np.column_stack([np.ones(len(toas)), rel[:, 0], rel[:, 1]])
    coef, *_ = np.linalg.lstsq(a, toas, rcond=None)
    cos_el = np.clip(np.hypot(coef[1], coef[2]) * SPEED_OF_SOUND, 0.0, 1.0)
    return float(np.arccos(cos_el))


def ranges_from_toas(toas_s: np.ndarray) -> np.ndarray:
    """Mean propagation distance per arrival order over the array channels."""
    return np.mean(np.asarray(toas_s, float) * SPEED_OF_SOUND, axis=0)


@dataclass
class LocalizationResult:
    toas_s: np.ndarray  # (M, 2): direct, first reflection
    azimuth_rad: np.ndarray  # per order e
    elevation_rad: np.ndarray
    radius_m: np.ndarray
    positions_m: np.ndarray  # (2, 3)
    low_confidence: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"toas_s": self.toas_s.tolist(), "azimuth_rad": self.azimuth_rad.tolist(),
                "azimuth_deg": np.rad2deg(self.azimuth_rad).tolist(),
                "elevation_rad": self.elevation_rad.tolist(), "radius_m": self.radius_m.tolist(),
                "positions_m": self.positions_m.tolist(), "low_confidence": list(self.low_confidence)}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def localize(rirs, array: ArraySpec, offset_m=(0.0, 0.0, 0.0), half_window_s: float = 0.001) -> LocalizationResult:
    """Source (e = 0) and first image source (e = 1) positions, array-centred.

    ``offset_m`` is a rigid translation applied to the result, for arrays
    placed away from the listener.
    """
    fs = rirs[0].sample_rate_hz
    toas = estimate_toas(rirs)
    az, el, flags = [], [], []
    for e in range(2):
        # sources are taken at array height; the image lies below it
        elev = 0.0 if e == 0 else -_elevation_from_toas(toas[:, e], array)
        centre = toas[:, e].mean()
        doa = das_doa(rirs, array, (centre - half_window_s, centre + half_window_s), fs, elev)
        az.append(doa.azimuth_rad)
        el.append(elev)
        flags.append(doa.low_confidence)
    az, el, rho = np.array(az), np.array(el), ranges_from_toas(toas)
    pos = np.stack([rho * np.cos(az) * np.cos(el), rho * np.sin(az) * np.cos(el), rho * np.sin(el)], 1)
    pos = pos + np.asarray(array.reference, float) + np.asarray(offset_m, float)
    return LocalizationResult(toas, az, el, rho, pos, flags)


def _matched_amplitude(h: np.ndarray, toa_samples: float) -> float:
    """Tap amplitude as the area under the arrival; insensitive to fractional delay and shelving."""
    k = int(round(toa_samples))
    lo, hi = max(0, k - 6), min(h.size, k + 26)
    return float(np.sum(h[lo:hi]))


def init_comb_params(loc: LocalizationResult, head: HeadGeometry, brir: Brir | None = None) -> CombParams:
    """Convert source/image positions to ear path differences; amplitudes from the BRIR."""
    ears = head.ears
    c0 = SPEED_OF_SOUND
    paths = np.linalg.norm(loc.positions_m[:, None, :] - ears[None, :, :], axis=-1)  # (e, ear)
    n_ds = (paths[0, 1] - paths[0, 0]) / c0
    n_df = max(0.0, (paths[1, 0] - paths[0, 0]) / c0)
    n_st = (paths[1, 1] - paths[1, 0]) / c0
    if brir is None:
        return CombParams(n_ds, n_df, n_st)
    fs = brir.sample_rate_hz
    ir = brir.render_array()
    amps = np.empty((2, 2))
    for e in range(2):
        for ear in range(2):
            t = paths[e, ear] / c0 * fs
            if t < 0 or t >= ir.shape[1]:
                raise ValueError("predicted arrival lies outside the BRIR support")
            amps[e, ear] = _matched_amplitude(ir[ear], t)
    if amps[0, 0] == 0 or amps[0, 1] == 0:
        raise ValueError("no direct-sound energy at the predicted arrival")
    return CombParams(n_ds, n_df, n_st, amps[0, 0], amps[1, 0], amps[0, 1], amps[1, 1])


def anechoic_brir(azimuth_rad: float, distance_m: float, head: HeadGeometry = HeadGeometry(),
                  sample_rate_hz: float = 16000.0) -> Brir:
    """Direct-path-only BRIR for a source at ``azimuth_rad`` in the horizontal plane."""
    c = np.asarray(head.center, float)
    pos = c + distance_m * np.array([np.cos(azimuth_rad), np.sin(azimuth_rad), 0.0])
    return synthesize_brir(RoomSpec(), pos, head, sample_rate_hz)


def init_ild_prior(brir_at_doa: Brir, freqs_hz, variance: float = 100.0) -> tuple[np.ndarray, np.ndarray]:
    mean, _ = ild_model(brir_at_doa, freqs_hz)
    return mean, np.full(mean.shape, float(variance))
