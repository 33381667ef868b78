"""Parametric binaural and array room impulse responses.

Coordinates are head-centred metres: x points forward, y to the left, z up.
Azimuth is measured counter-clockwise from +x, so positive angles are on the
listener's left (ear 1).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import signal

from .dsp import Waveform, read_wav, write_wav

SPEED_OF_SOUND = 343.0
KERNEL_HALF_WIDTH = 4  # 8-point fractional delay kernel
SHADOW_CUTOFF_HZ = 1500.0
SHADOW_MAX_DB = 6.0
DRR_CAP_DB = 100.0


@dataclass(frozen=True)
class Plane:
    """Infinite specular reflector through ``point`` with normal ``normal``."""

    point: tuple
    normal: tuple
    coefficient: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.coefficient <= 1.0:
            raise ValueError("reflection coefficient must lie in [0, 1]")

    @classmethod
    def floor(cls, height_below: float, coefficient: float = 0.8) -> "Plane":
        return cls((0.0, 0.0, -height_below), (0.0, 0.0, 1.0), coefficient)

    @classmethod
    def side_wall(cls, y: float, coefficient: float = 0.8) -> "Plane":
        return cls((0.0, y, 0.0), (0.0, 1.0, 0.0), coefficient)


@dataclass(frozen=True)
class ReflectionTap:
    toa_s: float
    amplitude: float
    order_index: int = 0
    shadow_db: float = 0.0  # high-frequency attenuation from the head, at Nyquist


@dataclass(frozen=True)
class RoomSpec:
    reflectors: tuple = ()
    rt60_s: float = 0.0
    tail_onset_s: float = 0.01
    noise_seed: int = 0
    tail_gain: float = 0.0  # RMS amplitude of the late tail at onset

    def __post_init__(self):
        if self.rt60_s < 0:
            raise ValueError("rt60 must be non-negative")
        if self.tail_onset_s <= 0:
            raise ValueError("tail onset must be positive")

    @property
    def has_tail(self) -> bool:
        return self.rt60_s > 0 and self.tail_gain > 0


@dataclass(frozen=True)
class HeadGeometry:
    """Two point ears on a sphere; ``ears[0]`` is the left ear (channel 1)."""

    center: tuple = (0.0, 0.0, 0.0)
    yaw_rad: float = 0.0
    radius_m: float = 0.09

    @property
    def ears(self) -> np.ndarray:
        c = np.asarray(self.center, float)
        left = np.array([-np.sin(self.yaw_rad), np.cos(self.yaw_rad), 0.0])
        return np.stack([c + self.radius_m * left, c - self.radius_m * left])

    @property
    def ear_axis(self) -> np.ndarray:
        """Unit vectors pointing outwards through each ear."""
        left = np.array([-np.sin(self.yaw_rad), np.cos(self.yaw_rad), 0.0])
        return np.stack([left, -left])


@dataclass(frozen=True)
class ArraySpec:
    positions: np.ndarray
    reference: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.positions, float))
        if pos.shape[0] < 2 or pos.shape[1] != 3:
            raise ValueError("array needs at least two 3-D microphone positions")
        d = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
        if np.any(d[~np.eye(len(pos), dtype=bool)] < 1e-9):
            raise ValueError("microphone positions must be distinct")
        object.__setattr__(self, "positions", pos)

    @classmethod
    def ring(cls, n_mics: int = 8, radius_m: float = 0.106, center=(0.0, 0.0, 0.0)):
        ang = 2 * np.pi * np.arange(n_mics) / n_mics
        c = np.asarray(center, float)
        pos = np.stack([radius_m * np.cos(ang), radius_m * np.sin(ang), np.zeros(n_mics)], 1) + c
        return cls(pos, tuple(c))

    @property
    def n_mics(self) -> int:
        return self.positions.shape[0]


@dataclass
class Brir:
    """Sparse taps per ear plus an optional sampled late part.

    ``tail`` has shape (2, n) and starts at sample ``tail_start``.
    """

    left_taps: list
    right_taps: list
    sample_rate_hz: float
    tail: np.ndarray | None = None
    tail_start: int = 0
    geometry: dict = field(default_factory=dict)
    rt60_s: float = 0.0
    seed: int = 0

    @property
    def taps(self) -> tuple:
        return (self.left_taps, self.right_taps)

    def direct_toa_s(self, ear: int) -> float:
        taps = self.taps[ear]
        if taps:
            direct = [t for t in taps if t.order_index == 0] or taps
            return min(t.toa_s for t in direct)
        return self.geometry["direct_toa_s"][ear]

    def support_samples(self) -> int:
        last = max((t.toa_s for ear in self.taps for t in ear), default=0.0)
        n = int(np.ceil(last * self.sample_rate_hz)) + KERNEL_HALF_WIDTH + 1
        if self.tail is not None:
            n = max(n, self.tail_start + self.tail.shape[1])
        return n

    def render(self, length_s: float | None = None) -> tuple[Waveform, Waveform]:
        return render_ir(self, length_s)

    def render_array(self, length_s: float | None = None) -> np.ndarray:
        left, right = render_ir(self, length_s)
        return np.stack([left.samples, right.samples])


def image_source(source_pos, reflector: Plane) -> np.ndarray:
    """Mirror ``source_pos`` across the reflector plane."""
    n = np.asarray(reflector.normal, float)
    norm = np.linalg.norm(n)
    if not np.isfinite(norm) or norm < 1e-12:
        raise ValueError("degenerate plane normal")
    n = n / norm
    s = np.asarray(source_pos, float)
    dist = np.dot(s - np.asarray(reflector.point, float), n)
    if abs(dist) < 1e-12:
        raise ValueError("source lies on the reflector plane")
    return s - 2.0 * dist * n


def _shadow_db(arrival_from: np.ndarray, head: HeadGeometry, ear: int) -> float:
    """High-frequency attenuation for the ear facing away from the arrival."""
    u = arrival_from - np.asarray(head.center, float)
    u = u / np.linalg.norm(u)
    facing = float(np.dot(u, head.ear_axis[ear]))
    return SHADOW_MAX_DB * max(0.0, -facing)


def _late_tail(room: RoomSpec, n_channels: int, fs: float) -> np.ndarray:
    """Exponentially decaying, channel-independent Gaussian noise."""
    n = int(np.ceil(room.rt60_s * fs))
    rng = np.random.default_rng(room.noise_seed)
    t = np.arange(n) / fs
    # energy falls by 60 dB over rt60
    env = room.tail_gain * np.exp(-0.5 * np.log(1e6) * t / room.rt60_s)
    return rng.standard_normal((n_channels, n)) * env


def _first_reflection_check(direct: float, reflections: list[float]) -> None:
    if not reflections:
        return
    lag = min(reflections) - direct
    if not 0.005 <= lag <= 0.040:
        warnings.warn(f"first reflection lag {lag * 1e3:.2f} ms outside [5, 40] ms", stacklevel=3)


def _receiver_taps(room, source, receiver, head=None, ear=0):
    c0 = SPEED_OF_SOUND
    d = np.linalg.norm(source - receiver)
    if d < 1e-6:
        raise ValueError("source coincides with a receiver")
    shadow = _shadow_db(source, head, ear) if head is not None else 0.0
    direct = ReflectionTap(d / c0, 1.0 / d, 0, shadow)
    reflections = []
    for plane in room.reflectors:
        if plane.coefficient == 0.0:
            continue
        img = image_source(source, plane)
        r = np.linalg.norm(img - receiver)
        shadow = _shadow_db(img, head, ear) if head is not None else 0.0
        reflections.append((r / c0, plane.coefficient / r, shadow))
    # order index e counts arrivals after the direct sound
    reflections.sort()
    return [direct] + [ReflectionTap(t, a, e, s) for e, (t, a, s) in enumerate(reflections, start=1)]


def synthesize_brir(room: RoomSpec, source_pos, head: HeadGeometry = HeadGeometry(),
                    sample_rate_hz: float = 16000.0) -> Brir:
    """Direct sound, first-order image sources and a stochastic tail per ear."""
    source = np.asarray(source_pos, float)
    ears = head.ears
    taps = [_receiver_taps(room, source, ears[i], head, i) for i in range(2)]
    _first_reflection_check(taps[0][0].toa_s, [t.toa_s for t in taps[0][1:]])
    tail, start = None, 0
    if room.has_tail:
        tail = _late_tail(room, 2, sample_rate_hz)
        first = min(taps[0][0].toa_s, taps[1][0].toa_s)
        start = int(round((first + room.tail_onset_s) * sample_rate_hz))
    geometry = {"source": source.tolist(), "head_center": list(head.center),
                "head_yaw_rad": head.yaw_rad, "head_radius_m": head.radius_m,
                "ears": ears.tolist()}
    return Brir(taps[0], taps[1], sample_rate_hz, tail, start, geometry,
                room.rt60_s, room.noise_seed)


def synthesize_array_rirs(room: RoomSpec, source_pos, array: ArraySpec,
                          sample_rate_hz: float = 16000.0) -> list[Waveform]:
    """Omnidirectional RIRs at every array microphone (no head shadowing)."""
    source = np.asarray(source_pos, float)
    tap_sets = [_receiver_taps(room, source, p) for p in array.positions]
    tail = _late_tail(room, array.n_mics, sample_rate_hz) if room.has_tail else None
    first = min(t[0].toa_s for t in tap_sets)
    start = int(round((first + room.tail_onset_s) * sample_rate_hz))
    last = max(t.toa_s for taps in tap_sets for t in taps)
    n = int(np.ceil(last * sample_rate_hz)) + KERNEL_HALF_WIDTH + 1
    if tail is not None:
        n = max(n, start + tail.shape[1])
    out = []
    for m, taps in enumerate(tap_sets):
        h = _render_taps(taps, n, sample_rate_hz)
        if tail is not None:
            h[start:start + tail.shape[1]] += tail[m]
        out.append(Waveform(h, sample_rate_hz))
    return out


def fractional_delay_kernel(frac: float) -> tuple[np.ndarray, np.ndarray]:
    """Hann-windowed sinc taps for a delay ``frac`` in [0, 1).

    Returns (offsets, weights); offsets are relative to the integer sample.
    """
    offsets = np.arange(-KERNEL_HALF_WIDTH + 1, KERNEL_HALF_WIDTH + 1)
    if frac == 0.0:
        return offsets, (offsets == 0).astype(float)
    x = offsets - frac
    win = 0.5 * (1.0 + np.cos(np.pi * x / KERNEL_HALF_WIDTH))
    return offsets, np.sinc(x) * win


def _shelf_coefficients(shadow_db: float, fs: float) -> tuple[np.ndarray, np.ndarray]:
    """First-order low shelf: unity at DC, ``-shadow_db`` at Nyquist."""
    g = 10.0 ** (-shadow_db / 20.0)
    # bilinear transform of H(s) = (s*g + wc) / (s + wc)
    k = np.tan(np.pi * SHADOW_CUTOFF_HZ / fs)
    b = np.array([g + k, k - g]) / (1.0 + k)
    a = np.array([1.0, (k - 1.0) / (1.0 + k)])
    return b, a


def _render_taps(taps, n: int, fs: float) -> np.ndarray:
    h = np.zeros(n)
    for tap in taps:
        pos = tap.toa_s * fs
        base = int(np.floor(pos))
        offsets, weights = fractional_delay_kernel(pos - base)
        idx = base + offsets
        if idx[-1] >= n or idx[0] < -KERNEL_HALF_WIDTH:
            raise ValueError("impulse response length too short for tap list")
        keep = idx >= 0
        if tap.shadow_db > 0.0:
            part = np.zeros(n)
            part[idx[keep]] = tap.amplitude * weights[keep]
            b, a = _shelf_coefficients(tap.shadow_db, fs)
            h += signal.lfilter(b, a, part)
        else:
            h[idx[keep]] += tap.amplitude * weights[keep]
    return h


def render_ir(brir: Brir, length_s: float | None = None) -> tuple[Waveform, Waveform]:
    """Discrete left/right impulse responses."""
    fs = brir.sample_rate_hz
    needed = brir.support_samples()
    n = needed if length_s is None else int(round(length_s * fs))
    last_tap = max((t.toa_s for ear in brir.taps for t in ear), default=0.0)
    if n < int(np.floor(last_tap * fs)) + KERNEL_HALF_WIDTH + 1:
        raise ValueError("length too short for the last tap")
    out = []
    for ear in range(2):
        h = _render_taps(brir.taps[ear], n, fs)
        if brir.tail is not None:
            seg = brir.tail[ear, :max(0, n - brir.tail_start)]
            h[brir.tail_start:brir.tail_start + seg.size] += seg
        out.append(Waveform(h, fs))
    return out[0], out[1]


def hamming_taper(n: int, center: float, width: float) -> np.ndarray:
    """Hamming window of ``width`` samples centred at fractional ``center``."""
    x = np.arange(n) - center
    w = 0.54 + 0.46 * np.cos(2.0 * np.pi * x / width)
    w[np.abs(x) > width / 2.0] = 0.0
    return w


def direct_path_reference(brir: Brir, window_ms: float = 5.0) -> Brir:
    """Keep only the rendered IR under a Hamming window on each direct arrival."""
    if window_ms <= 0:
        raise ValueError("window_ms must be positive")
    fs = brir.sample_rate_hz
    ir = brir.render_array()
    width = window_ms * 1e-3 * fs
    windowed = np.stack([ir[e] * hamming_taper(ir.shape[1], brir.direct_toa_s(e) * fs, width)
                         for e in range(2)])
    geometry = dict(brir.geometry, direct_toa_s=[brir.direct_toa_s(0), brir.direct_toa_s(1)],
                    direct_window_ms=window_ms)
    return Brir([], [], fs, windowed, 0, geometry, 0.0, brir.seed)


def measure_drr(brir: Brir, half_window_ms: float = 2.5) -> float:
    """Direct-to-reverberant ratio in dB over both ears, capped at +100 dB."""
    fs = brir.sample_rate_hz
    ir = brir.render_array()
    direct = rest = 0.0
    for e in range(2):
        t = np.arange(ir.shape[1]) / fs
        inside = np.abs(t - brir.direct_toa_s(e)) <= half_window_ms * 1e-3
        direct += np.sum(ir[e, inside] ** 2)
        rest += np.sum(ir[e, ~inside] ** 2)
    if direct <= 0:
        raise ValueError("impulse response has no direct energy")
    if rest <= direct * 10.0 ** (-DRR_CAP_DB / 10.0):
        return DRR_CAP_DB
    return float(10.0 * np.log10(direct / rest))


def schroeder_decay_db(h: np.ndarray) -> np.ndarray:
    """Backward-integrated energy decay curve in dB (0 dB at the start)."""
    edc = np.cumsum(h[::-1] ** 2)[::-1]
    return 10.0 * np.log10(np.maximum(edc / edc[0], 1e-300))


def calibrate_drr(room: RoomSpec, source_pos, target_db: float, head: HeadGeometry = HeadGeometry(),
                  sample_rate_hz: float = 16000.0, tol_db: float = 0.05) -> RoomSpec:
    """Scale all reflection coefficients so the synthesized BRIR hits ``target_db``.

    DRR decreases monotonically with the common scale, so a bisection over
    the scale factor suffices.  Raises if the target is out of reach.
    """
    base = [p.coefficient for p in room.reflectors]
    top = 1.0 / max(base) if base and max(base) > 0 else 0.0

    def drr_at(scale):
        planes = tuple(replace(p, coefficient=min(1.0, c * scale)) for p, c in zip(room.reflectors, base))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            brir = synthesize_brir(replace(room, reflectors=planes), source_pos, head, sample_rate_hz)
        return measure_drr(brir), planes

    hi_drr, _ = drr_at(0.0)
    lo_drr, _ = drr_at(top)
    if not lo_drr - tol_db <= target_db <= hi_drr + tol_db:
        raise ValueError(f"target DRR {target_db} dB outside reachable [{lo_drr:.2f}, {hi_drr:.2f}] dB")
    lo, hi = 0.0, top
    planes = room.reflectors
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        drr, planes = drr_at(mid)
        if abs(drr - target_db) < tol_db:
            break
        if drr > target_db:
            lo = mid
        else:
            hi = mid
    return replace(room, reflectors=planes)


def source_position(azimuth_deg: float, distance_m: float, height_m: float = 0.0) -> np.ndarray:
    a = np.deg2rad(azimuth_deg)
    return np.array([distance_m * np.cos(a), distance_m * np.sin(a), height_m])


def _tap_dict(t: ReflectionTap) -> dict:
    return {"toa_s": t.toa_s, "amplitude": t.amplitude, "order_index": t.order_index,
            "shadow_db": t.shadow_db}


def save_brir(brir: Brir, wav_path, fmt: str = "float32") -> Path:
    """Stereo WAV of the rendered IR plus a JSON sidecar; returns the sidecar path."""
    wav_path = Path(wav_path)
    left, right = brir.render()
    write_wav(wav_path, [left, right], brir.sample_rate_hz, fmt)
    sidecar = wav_path.with_suffix(".json")
    meta = {
        "sample_rate_hz": brir.sample_rate_hz,
        "taps": {"left": [_tap_dict(t) for t in brir.left_taps],
                 "right": [_tap_dict(t) for t in brir.right_taps]},
        "geometry": brir.geometry,
        "rt60_s": brir.rt60_s,
        "seed": brir.seed,
        "tail": {"present": brir.tail is not None, "start_sample": brir.tail_start,
                 "length": 0 if brir.tail is None else int(brir.tail.shape[1])},
    }
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return sidecar


def load_brir(wav_path) -> Brir:
    """Rebuild a Brir from WAV + sidecar; the tail is the WAV minus the taps."""
    wav_path = Path(wav_path)
    meta = json.loads(wav_path.with_suffix(".json").read_text())
    chans, fs = read_wav(wav_path)
    taps = [[ReflectionTap(**t) for t in meta["taps"][k]] for k in ("left", "right")]
    brir = Brir(taps[0], taps[1], fs, geometry=meta["geometry"], rt60_s=meta["rt60_s"],
                seed=meta["seed"])
    if meta["tail"]["present"]:
        n = len(chans[0])
        sparse = np.stack([_render_taps(taps[e], n, fs) for e in range(2)])
        residual = np.stack([c.samples for c in chans]) - sparse
        start = meta["tail"]["start_sample"]
        brir.tail = residual[:, start:]
        brir.tail_start = start
    return brir
