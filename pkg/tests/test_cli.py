import json
import subprocess
import sys

import numpy as np
import pytest

from binsep.cli import main
from binsep.dsp import read_wav, write_wav
from binsep.evaluation import scores_from_csv, sdr
from binsep.models import load_matrix

FS = 16000.0
SMALL = {"angles_deg": [0.0, 30.0, 60.0], "per_combination": 2, "duration_s": 1.5,
         "methods": ["messl", "oracle", "random"]}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


def test_synth_files_and_determinism(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"angles_deg": [0, 15, 30, 45, 60, 75, 90]}))
    for out in ("a", "b"):
        assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / out), "--seed", "3"]) == 0
    brirs = sorted(p.name for p in (tmp_path / "a").glob("brir_*.wav"))
    assert len(brirs) == 7
    for name in brirs + ["array_00.wav", "manifest.json"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synth_rt60_zero_has_empty_tail(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"rt60_s": 0.0, "angles_deg": [0.0, 30.0]}))
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    meta = json.loads((tmp_path / "o" / "brir_00.json").read_text())
    assert meta["tail"]["present"] is False and meta["rt60_s"] == 0.0


def test_usage_errors(tmp_path, capsys):
    assert main([]) == 64
    assert main(["separate", "--mixture", "m.wav", "--init", "i.json", "--out", str(tmp_path)]) == 64
    assert main(["experiment", "--out", str(tmp_path), "--limit", "x"]) == 64


def test_bad_input(tmp_path, config):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    bad.write_text(json.dumps({"angles_deg": "abc", "bogus": 1}))
    assert main(["experiment", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert main(["experiment", "--config", config, "--methods", "messl,zzz", "--out", str(tmp_path / "o")]) == 2
    assert main(["mix", "--config", config, "--scene", "99", "--out", str(tmp_path / "o")]) == 2


def test_console_script_exit_code(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "binsep.cli", "separate", "--mixture", "x.wav"],
                          capture_output=True, cwd=tmp_path)
    assert proc.returncode == 64


@pytest.fixture
def mixed(tmp_path, config):
    out = tmp_path / "mix"
    assert main(["mix", "--config", config, "--scene", "1", "--out", str(out)]) == 0
    return out


def test_mix_outputs(mixed):
    init = json.loads((mixed / "init.json").read_text())
    assert len(init["sources"]) == 2 and init["images"] == ["image_0.wav", "image_1.wav"]
    chans, fs = read_wav(mixed / "mixture.wav")
    assert len(chans) == 2 and fs == FS


def test_separate_malformed_init(mixed, tmp_path):
    bad = tmp_path / "bad_init.json"
    bad.write_text(json.dumps({"sources": [{"comb": {"n_ds_s": 0.0, "n_df_s": -1.0}}]}))
    assert main(["separate", "--mixture", str(mixed / "mixture.wav"), "--init", str(bad),
                 "--method", "messl", "--out", str(tmp_path / "s")]) == 2
    assert main(["separate", "--mixture", str(tmp_path / "missing.wav"), "--init", str(mixed / "init.json"),
                 "--method", "messl", "--out", str(tmp_path / "s")]) == 2


@pytest.mark.parametrize("method", ["messl", "eric-messl", "random"])
def test_separate_methods(mixed, tmp_path, method):
    out = tmp_path / method
    assert main(["separate", "--mixture", str(mixed / "mixture.wav"), "--init", str(mixed / "init.json"),
                 "--method", method, "--out", str(out), "--pgm"]) == 0
    assert (out / "source_0.wav").exists() and (out / "mask_source_0.pgm").exists()
    mask, meta = load_matrix(out / "mask_source_0.f32")
    assert meta["source_id"] == 0 and np.all((mask >= 0) & (mask <= 1))
    diag = json.loads((out / "diagnostics.json").read_text())
    assert diag["method"] == method
    if method != "random":
        assert np.all(np.diff(diag["loglik_trace"]) >= -1e-6)
        assert (out / "mask_garbage.f32").exists()
    else:
        ref = read_wav(mixed / "image_0.wav")[0][0]
        est = read_wav(out / "source_0.wav")[0][0]
        assert -6.0 < sdr(est, ref) < 6.0


def test_separate_oracle_on_disjoint_sources(tmp_path, rng):
    from scipy import signal
    n = 24000
    b_lo = signal.butter(8, 2000, fs=FS, output="sos")
    b_hi = signal.butter(8, 4000, "highpass", fs=FS, output="sos")
    lo = signal.sosfilt(b_lo, rng.standard_normal((2, n)))
    hi = signal.sosfilt(b_hi, rng.standard_normal((2, n)))
    write_wav(tmp_path / "image_0.wav", list(lo), FS)
    write_wav(tmp_path / "image_1.wav", list(hi), FS)
    write_wav(tmp_path / "mixture.wav", list(lo + hi), FS)
    init = {"sources": [{"comb": {"n_ds_s": 0.0}}, {"comb": {"n_ds_s": 1e-4}}],
            "images": ["image_0.wav", "image_1.wav"]}
    (tmp_path / "init.json").write_text(json.dumps(init))
    assert main(["separate", "--mixture", str(tmp_path / "mixture.wav"), "--init", str(tmp_path / "init.json"),
                 "--method", "oracle", "--out", str(tmp_path / "o")]) == 0
    est = read_wav(tmp_path / "o" / "source_0.wav")[0][0]
    ref = read_wav(tmp_path / "image_0.wav")[0][0]
    assert sdr(est, ref) > 20.0


def test_experiment_outputs_and_determinism(tmp_path, config):
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["experiment", "--config", config, "--out", str(out), "--save-masks"]) == 0
        runs.append(out)
    a, b = runs
    assert (a / "scores.csv").read_bytes() == (b / "scores.csv").read_bytes()
    masks = sorted(p.name for p in (a / "masks").iterdir())
    assert len(masks) == 6 * 3 * 2
    for name in masks:
        assert (a / "masks" / name).read_bytes() == (b / "masks" / name).read_bytes()
    scores = scores_from_csv((a / "scores.csv").read_text())
    assert len(scores) == 18 and {s.method for s in scores} == {"messl", "oracle", "random"}
    report = json.loads((a / "report.json").read_text())
    assert report["expected_scenes"] == 6
    for m in ("oracle", "random"):
        assert report["ttests"][m]["vs"] == "messl" and report["ttests"][m]["pvalue"] is not None
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["scene_count"] == 6 and "config_sha256" in manifest
