"""Acceptance suite: one test per criterion, each at its stated tolerance.

Run directly (``python3 tests/test_acceptance.py``) or through pytest; the
terminal summary prints one PASS/FAIL line per criterion.
"""

import json
import time
from dataclasses import replace

import numpy as np
import pytest

from binsep.acoustics import ArraySpec, HeadGeometry, Plane, RoomSpec, source_position
from binsep.cli import main as cli_main
from binsep.dsp import StftParams, Waveform, istft, stft, wrap_phase
from binsep.em import EmConfig, SoftMask, SourceInit, apply_masks, run_em
from binsep.evaluation import oracle_masks, paired_ttest
from binsep.experiment import ExperimentConfig, enumerate_scenes, prepare_source, render_scene, run_experiment
from binsep.localization import init_comb_params, localize
from binsep.mixture import interaural_spectrogram
from binsep.models import CombParams, IcMask, comb_ipd_model, ic_mask
from binsep.acoustics import synthesize_array_rirs, synthesize_brir

import warnings

FS = 16000.0
BENCH_METHODS = ("messl", "eric-messl", "oracle", "random")


def record(log, n, ok, detail):
    log[n] = (bool(ok), detail)
    print(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def benchmark():
    cfg = replace(ExperimentConfig(), methods=BENCH_METHODS)
    t0 = time.perf_counter()
    outcome = run_experiment(cfg)
    return outcome, time.perf_counter() - t0


@pytest.fixture(scope="module")
def scene0():
    cfg = ExperimentConfig()
    spec = enumerate_scenes(cfg)[0]
    setups = {}
    rs = render_scene(cfg, spec, setups)
    l, r = stft(rs.left, cfg.stft), stft(rs.right, cfg.stft)
    return cfg, spec, setups, rs, l, r


# 1. comb model against the FFT of rendered two-spike pairs
def test_criterion_01_comb_exactness(acceptance_log):
    rng = np.random.default_rng(2024)
    n_fft = 2048
    freqs = np.fft.rfftfreq(n_fft, 1 / FS)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        ds, st_ = rng.integers(-8, 9, 2)
        df = int(rng.integers(80, 640))
        p01, p02 = rng.uniform(0.2, 1.5, 2)
        p11, p12 = rng.uniform(-0.95, 0.95, 2) * (p01, p02)
        left, right = np.zeros(n_fft), np.zeros(n_fft)
        start = 20
        left[start] += p01
        left[start + df] += p11
        right[start + ds] += p02
        right[start + df + st_] += p12
        oracle = np.angle(np.fft.rfft(left) / np.fft.rfft(right))
        model = comb_ipd_model(CombParams(ds / FS, df / FS, st_ / FS, p01, p11, p02, p12), freqs)
        worst = max(worst, float(np.max(np.abs(wrap_phase(model - oracle)))))
    elapsed = time.perf_counter() - t0
    record(acceptance_log, 1, worst < 1e-9 and elapsed < 10.0,
           f"max phase error {worst:.2e} rad over 200 draws (< 1e-9), {elapsed:.2f} s (< 10 s)")


# 2. EM traces on every benchmark scene
def test_criterion_02_em_correctness(acceptance_log, benchmark):
    outcome, _ = benchmark
    worst_drop, worst_norm, runs, iters = 0.0, 0.0, 0, set()
    for res in outcome.results:
        for method, diag in res.diagnostics.items():
            trace = np.array(diag["loglik_trace"])
            iters.add(trace.size)
            worst_drop = max(worst_drop, float(-np.min(np.diff(trace))) if trace.size > 1 else 0.0)
            worst_norm = max(worst_norm, max(diag["posterior_norm_error"]))
            runs += 1
    ok = worst_drop <= 1e-6 and worst_norm <= 1e-9 and iters == {16} and runs > 0
    record(acceptance_log, 2, ok, f"{runs} EM runs x {sorted(iters)} iterations: largest log-likelihood drop "
                                  f"{max(worst_drop, 0.0):.2e} (<= 1e-6), normalization error {worst_norm:.2e} (<= 1e-9)")


# 3. nesting: unit coherence and a degenerate reflection grid reduce to the baseline
def test_criterion_03_variant_nesting(acceptance_log, scene0):
    cfg, spec, setups, rs, l, r = scene0
    obs = interaural_spectrogram(l, r)
    em = replace(cfg.em, max_iters=16)
    direct = [setups[a].init_direct for a in spec.angle_indices]
    base, _ = run_em(obs, direct, replace(em, variant="messl"))
    ones = IcMask(np.ones(obs.shape), cfg.kappa, np.ones(obs.shape))
    ic, _ = run_em(obs, direct, replace(em, variant="ic-messl"), ic=ones)
    flat = [SourceInit(replace(setups[a].init_er.comb, p11=0.0, p12=0.0), setups[a].init_er.ild_mean_db,
                       setups[a].init_er.ild_var) for a in spec.angle_indices]
    base_flat, _ = run_em(obs, flat, replace(em, variant="messl"))
    er, _ = run_em(obs, flat, replace(em, variant="er-messl", grid_steps_per_dim=(5, 1, 1)))
    ic_same = all(np.array_equal(a.values, b.values) for a, b in zip(base, ic))
    er_same = all(np.array_equal(a.values, b.values) for a, b in zip(base_flat, er))
    record(acceptance_log, 3, ic_same and er_same,
           f"ic-messl(gamma=1) bit-identical: {ic_same}; er-messl(degenerate grid) bit-identical: {er_same}")


# 4. ordering on the seeded benchmark
def test_criterion_04_ordering(acceptance_log, benchmark):
    outcome, elapsed = benchmark
    rep = outcome.report()
    m = rep.mean_sdr_db
    n = min(rep.scene_count.values())
    gap = m["eric-messl"] - m["messl"]
    ok = (n >= 20 and m["oracle"] > m["eric-messl"] >= m["messl"] > m["random"] and gap >= 0.1
          and elapsed < 900 and not rep.failures)
    record(acceptance_log, 4, ok,
           f"{n} scenes: ORACLE {m['oracle']:.2f} > ERIC {m['eric-messl']:.2f} >= MESSL {m['messl']:.2f} "
           f"> Random {m['random']:.2f} dB, ERIC-MESSL {gap:+.2f} dB (>= +0.1), {elapsed:.0f} s (< 900 s)")


# 5. coherence behaviour
def test_criterion_05_ic_behavior(acceptance_log, scene0):
    rng = np.random.default_rng(5)
    x = stft(Waveform(rng.standard_normal(48000), FS))
    same = ic_mask(x, x, 0.5).gamma
    y = stft(Waveform(rng.standard_normal(48000), FS))
    noise = ic_mask(x, y, 0.5).gamma
    _, _, _, _, l, r = scene0
    mix = ic_mask(l, r, 0.5).gamma
    in_range = all(np.all((g >= 0) & (g <= 1)) for g in (same, noise, mix))
    identical = bool(np.all(same == 1.0))
    mean_noise = float(noise.mean())
    record(acceptance_log, 5, identical and in_range and mean_noise < 0.3,
           f"identical channels gamma == 1: {identical}; gamma in [0,1]: {in_range}; "
           f"independent noise mean gamma {mean_noise:.3f} (< 0.3)")


# 6. localization-based initialization
def test_criterion_06_initialization(acceptance_log):
    head, array = HeadGeometry(), ArraySpec.ring()
    az_err, delay_err, failures, trials = 0.0, 0.0, [], 0
    for reflector in (Plane.floor(1.6), Plane.side_wall(-3.0)):
        room = RoomSpec((reflector,))
        for az in (0.0, 30.0, -30.0, 60.0, -60.0):
            trials += 1
            pos = source_position(az, 1.68)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                brir = synthesize_brir(room, pos, head)
                rirs = synthesize_array_rirs(room, pos, array)
            try:
                loc = localize(rirs, array)
                c = init_comb_params(loc, head, brir)
            except ValueError as exc:
                failures.append(f"{az}: {exc}")
                continue
            lt, rt = brir.taps
            truth = np.array([rt[0].toa_s - lt[0].toa_s, lt[1].toa_s - lt[0].toa_s, rt[1].toa_s - lt[1].toa_s])
            est = np.array([c.n_ds_s, c.n_df_s, c.n_st_s])
            az_err = max(az_err, abs((np.rad2deg(loc.azimuth_rad[0]) - az + 180) % 360 - 180))
            delay_err = max(delay_err, float(np.max(np.abs(est - truth))) * FS)
    ok = not failures and az_err <= 5.0 and delay_err <= 2.0
    record(acceptance_log, 6, ok, f"{trials - len(failures)}/{trials} succeeded; max azimuth error {az_err:.2f} deg "
                                  f"(<= 5), max delay error {delay_err:.3f} samples (<= 2)")


# 7. STFT and mask plumbing
def test_criterion_07_plumbing(acceptance_log, scene0):
    _, _, _, rs, l, r = scene0
    ones = np.ones(l.bins.shape)
    (lo, ro), = apply_masks(l, r, [ones])
    ident = max(np.linalg.norm(lo.samples - rs.left.samples) / np.linalg.norm(rs.left.samples),
                np.linalg.norm(ro.samples - rs.right.samples) / np.linalg.norm(rs.right.samples))
    m = np.random.default_rng(7).uniform(size=ones.shape)
    (a, _), (b, _) = apply_masks(l, r, [SoftMask(m, 0), SoftMask(1 - m, 1)])
    comp = np.linalg.norm(a.samples + b.samples - rs.left.samples) / np.linalg.norm(rs.left.samples)
    per_source = [[stft(Waveform(rs.images[k, e], FS)) for e in range(2)] for k in range(rs.images.shape[0])]
    total = sum(mk.values for mk in oracle_masks(per_source))
    partition = bool(np.all(total == 1.0))
    record(acceptance_log, 7, ident < 1e-6 and comp < 1e-6 and partition,
           f"identity round trip {ident:.1e} (< 1e-6); complementary masks {comp:.1e} (< 1e-6); "
           f"oracle partition: {partition}")


# 8. statistics
def test_criterion_08_statistics(acceptance_log, benchmark):
    # Student's sleep data: paired differences of two soporifics, t = 4.0621 with 9 df
    a = [0.7, -1.6, -0.2, -1.2, -0.1, 3.4, 3.7, 0.8, 0.0, 2.0]
    b = [1.9, 0.8, 1.1, 0.1, -0.1, 4.4, 5.5, 1.6, 4.6, 3.4]
    t = paired_ttest(b, a)
    outcome, _ = benchmark
    rep = outcome.report()
    pairs = {m: rep.ttests[m]["pvalue"] for m in BENCH_METHODS if m != "messl"}
    ok = round(t.statistic, 4) == 4.0621 and all(p is not None for p in pairs.values())
    record(acceptance_log, 8, ok, f"textbook t = {t.statistic:.4f} (expected 4.0621); p-values vs messl: "
           + ", ".join(f"{m} {p:.3g}" for m, p in pairs.items()))


# 9. runtime of one separation
def test_criterion_09_runtime(acceptance_log, scene0):
    cfg, spec, setups, rs, l, r = scene0
    assert rs.left.duration_s >= 3.0
    obs = interaural_spectrogram(l, r)
    inits = [setups[a].init_er for a in spec.angle_indices]
    em = replace(cfg.em, variant="eric-messl", max_iters=16, grid_steps_per_dim=5)
    t0 = time.perf_counter()
    ic = ic_mask(l, r, cfg.kappa)
    _, state = run_em(obs, inits, em, ic=ic)
    elapsed = time.perf_counter() - t0
    grid = state.sizes[:-1]
    record(acceptance_log, 9, elapsed < 60.0 and grid == [125, 125] and len(state.loglik_trace) == 16,
           f"eric-messl, {grid} candidates, 16 iterations on {rs.left.duration_s:.2f} s: {elapsed:.1f} s (< 60 s)")


# 10. determinism of the command-line tools
def test_criterion_10_determinism(acceptance_log, tmp_path):
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps({"methods": list(BENCH_METHODS)}))
    mismatched = []
    for run in ("a", "b"):
        base = tmp_path / run
        codes = [cli_main(["synth", "--config", str(cfg), "--out", str(base / "synth")]),
                 cli_main(["mix", "--config", str(cfg), "--scene", "4", "--out", str(base / "mix")]),
                 cli_main(["experiment", "--config", str(cfg), "--limit", "2", "--save-masks",
                           "--out", str(base / "exp")])]
        for method in ("messl", "eric-messl", "random"):
            codes.append(cli_main(["separate", "--mixture", str(base / "mix" / "mixture.wav"),
                                   "--init", str(base / "mix" / "init.json"), "--method", method,
                                   "--out", str(base / "sep" / method)]))
        assert codes == [0] * len(codes)
    compared = 0
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_dir() or f.name in ("manifest.json", "diagnostics.json") and "exp" in f.parts:
            continue
        other = tmp_path / "b" / f.relative_to(tmp_path / "a")
        compared += 1
        if not other.exists() or other.read_bytes() != f.read_bytes():
            mismatched.append(str(f.relative_to(tmp_path / "a")))
    record(acceptance_log, 10, not mismatched and compared > 20,
           f"{compared} output files compared (CSV, masks, WAVs, JSON); mismatches: {mismatched or 'none'}")


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
