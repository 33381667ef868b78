"""SDR, control masks, aggregation and paired significance tests."""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg, stats

from .dsp import Spectrogram, Waveform
from .em import SoftMask

SDR_CAP_DB = 100.0
PROJECTION_TAPS = 512
SCORE_COLUMNS = ("scene_id", "method", "target_angle_deg", "interferer_angle_deg",
                 "sdr_db_left", "sdr_db_right", "seed", "status")


def _samples(x) -> np.ndarray:
    return x.samples if isinstance(x, Waveform) else np.asarray(x, float)


def _xcorr(a: np.ndarray, b: np.ndarray, n_lags: int) -> np.ndarray:
    """sum_n a[n] b[n - k] for k = 0 .. n_lags-1."""
    n = a.size + b.size
    nfft = 1 << (n - 1).bit_length()
    c = np.fft.irfft(np.fft.rfft(a, nfft) * np.conj(np.fft.rfft(b, nfft)), nfft)
    return c[:n_lags]


def sdr(estimate, reference, taps: int = PROJECTION_TAPS) -> float:
    """Source-to-distortion ratio after projecting onto delayed copies of the reference.

    The distortion-free part is the least-squares fit of ``estimate`` by a
    causal ``taps``-long filter applied to ``reference``.
    """
    est, ref = _samples(estimate), _samples(reference)
    n = min(est.size, ref.size)
    est, ref = est[:n], ref[:n]
    if not np.any(ref):
        raise ValueError("reference signal is all zero")
    taps = min(taps, n)
    r = _xcorr(ref, ref, taps)
    c = _xcorr(est, ref, taps)
    # tiny diagonal loading keeps the Toeplitz solve stable for band-limited references
    r = r.copy()
    r[0] *= 1.0 + 1e-12
    coeffs = linalg.solve_toeplitz(r, c)
    proj = np.convolve(ref, coeffs)[:n]
    err = est - proj
    p_sig, p_err = float(np.dot(proj, proj)), float(np.dot(err, err))
    if p_sig <= 0.0:
        return -SDR_CAP_DB
    if p_err <= p_sig * 10.0 ** (-SDR_CAP_DB / 10.0):
        return SDR_CAP_DB
    return float(np.clip(10.0 * np.log10(p_sig / p_err), -SDR_CAP_DB, SDR_CAP_DB))


def oracle_masks(source_specs) -> list[SoftMask]:
    """Ideal binary masks from clean per-source images.

    ``source_specs[l]`` is a sequence of Spectrograms (one per ear) of source
    l alone.  A bin goes to the source with the largest energy summed over
    ears; ties go to the lowest source index.
    """
    energy = np.stack([sum(np.abs(s.bins if isinstance(s, Spectrogram) else s) ** 2 for s in specs)
                       for specs in source_specs])
    winner = np.argmax(energy, axis=0)
    return [SoftMask((winner == l).astype(float), l) for l in range(energy.shape[0])]


def oracle_mask(target_specs, interferer_specs) -> SoftMask:
    """Binary mask of bins where the target is strictly loudest."""
    return oracle_masks([target_specs] + [[s] if isinstance(s, Spectrogram) else s
                                          for s in interferer_specs])[0]


def random_mask(frames: int, bins: int, seed: int) -> SoftMask:
    rng = np.random.default_rng(seed)
    return SoftMask(rng.uniform(0.0, 1.0, (frames, bins)), 0)


def random_masks(frames: int, bins: int, seed: int) -> list[SoftMask]:
    """A uniform random mask and its complement."""
    m = random_mask(frames, bins, seed)
    return [m, SoftMask(1.0 - m.values, 1)]


def mixture_count(total_positions: int, sources: int, per_combination: int) -> int:
    """Number of mixtures: every source-position subset times random draws per subset."""
    if sources > total_positions or sources < 1 or per_combination < 1:
        raise ValueError("need 1 <= sources <= total_positions and per_combination >= 1")
    return math.comb(total_positions, sources) * per_combination


@dataclass(frozen=True)
class SeparationScore:
    scene_id: str
    method: str
    target_angle_deg: float
    interferer_angle_deg: float
    sdr_db_left: float
    sdr_db_right: float
    seed: int
    status: str = "ok"

    @property
    def sdr_db(self) -> float:
        return 0.5 * (self.sdr_db_left + self.sdr_db_right)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass(frozen=True)
class TTestResult:
    statistic: float
    pvalue: float
    df: int


def paired_ttest(a, b) -> TTestResult:
    """Two-sided paired t-test of mean(a - b) = 0."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("paired samples must be equal-length 1-D sequences with n >= 2")
    d = a - b
    n = d.size
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        return TTestResult(math.copysign(math.inf, mean) if mean else 0.0, 0.0 if mean else 1.0, n - 1)
    t = mean / (sd / math.sqrt(n))
    p = 2.0 * stats.t.sf(abs(t), n - 1)
    return TTestResult(float(t), float(min(1.0, p)), n - 1)


@dataclass
class ExperimentReport:
    mean_sdr_db: dict
    per_target_angle: dict
    ttests: dict  # method -> {"vs": baseline, "statistic", "pvalue", "df", "n"}
    scene_count: dict
    failures: list = field(default_factory=list)
    expected_scenes: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def aggregate(scores, baseline: str = "messl", expected_scenes: int | None = None) -> ExperimentReport:
    scores = list(scores)
    if not scores:
        raise ValueError("no scores to aggregate")
    good = [s for s in scores if s.ok]
    by_method = defaultdict(list)
    by_angle = defaultdict(lambda: defaultdict(list))
    for s in good:
        by_method[s.method].append(s)
        by_angle[s.method][s.target_angle_deg].append(s.sdr_db)
    means = {m: float(np.mean([s.sdr_db for s in v])) for m, v in sorted(by_method.items())}
    per_angle = {m: {f"{a:g}": float(np.mean(v)) for a, v in sorted(d.items())}
                 for m, d in sorted(by_angle.items())}
    ttests = {}
    if baseline in by_method:
        base = {s.scene_id: s.sdr_db for s in by_method[baseline]}
        for m, v in sorted(by_method.items()):
            if m == baseline:
                continue
            pairs = [(s.sdr_db, base[s.scene_id]) for s in v if s.scene_id in base]
            entry = {"vs": baseline, "n": len(pairs), "statistic": None, "pvalue": None, "df": None}
            if len(pairs) >= 2:
                res = paired_ttest([p[0] for p in pairs], [p[1] for p in pairs])
                entry.update(statistic=res.statistic, pvalue=res.pvalue, df=res.df)
            ttests[m] = entry
    failures = [{"scene_id": s.scene_id, "method": s.method, "status": s.status} for s in scores if not s.ok]
    counts = {m: len(v) for m, v in sorted(by_method.items())}
    return ExperimentReport(means, per_angle, ttests, counts, failures, expected_scenes)


def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if math.isnan(x) else f"{x:.6f}"
    return str(x)


def scores_to_csv(scores) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCORE_COLUMNS)
    for s in scores:
        w.writerow([_fmt(getattr(s, c)) for c in SCORE_COLUMNS])
    return buf.getvalue()


def scores_from_csv(text: str) -> list[SeparationScore]:
    rows = csv.DictReader(io.StringIO(text))
    return [SeparationScore(r["scene_id"], r["method"], float(r["target_angle_deg"]),
                            float(r["interferer_angle_deg"]), float(r["sdr_db_left"]),
                            float(r["sdr_db_right"]), int(r["seed"]), r.get("status", "ok"))
            for r in rows]
