import numpy as np
import pytest

from binsep.experiment import (ExperimentConfig, enumerate_scenes, prepare_source, run_experiment, utterance,
                               worker_count)
from binsep.speech import fit_length, load_utterance, synthetic_utterance
from binsep.dsp import Waveform, write_wav

SMALL = ExperimentConfig(angles_deg=(0.0, 30.0, 60.0), per_combination=2, duration_s=1.5,
                         methods=("messl", "oracle", "random"))


def test_scene_enumeration():
    scenes = enumerate_scenes(SMALL)
    assert len(scenes) == SMALL.scene_count == 6
    assert len({s.seed for s in scenes}) == 6
    # every subset appears per_combination times, target rotating through it
    targets = [s.angle_indices[0] for s in scenes]
    assert targets == [0, 1, 0, 2, 1, 2]
    assert all(len(set(s.utterance_indices)) == 2 for s in scenes)
    assert enumerate_scenes(SMALL) == scenes


def test_default_scale():
    cfg = ExperimentConfig()
    assert cfg.scene_count == 30
    assert cfg.em.max_iters == 16 and cfg.em.grid_steps_per_dim == 5


def test_config_round_trip_and_validation():
    d = SMALL.to_dict()
    assert ExperimentConfig.from_dict(d) == SMALL
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        ExperimentConfig(methods=("messl", "nope"))
    with pytest.raises(ValueError):
        ExperimentConfig(angles_deg=(0.0, 0.0))
    with pytest.raises(FileNotFoundError):
        ExperimentConfig(utterances=("/nonexistent.wav",))


def test_worker_count(monkeypatch):
    monkeypatch.delenv("BINSEP_THREADS", raising=False)
    assert worker_count() == 1
    monkeypatch.setenv("BINSEP_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("BINSEP_THREADS", "x")
    with pytest.raises(ValueError):
        worker_count()


def test_synthetic_utterance():
    a, b = synthetic_utterance(4), synthetic_utterance(4)
    assert np.array_equal(a.samples, b.samples)
    assert a.samples.size == 48000
    assert np.sqrt(np.mean(a.samples ** 2)) == pytest.approx(1.0)
    assert not np.array_equal(a.samples, synthetic_utterance(5).samples)


def test_utterance_pool_from_files(tmp_path):
    write_wav(tmp_path / "u.wav", [np.ones(100)], 16000.0)
    w = load_utterance(tmp_path / "u.wav", 0.01)
    assert w.samples.size == 160 and w.samples[:100].all() and not w.samples[100:].any()
    with pytest.raises(ValueError):
        load_utterance(tmp_path / "u.wav", 1.0, 8000.0)
    cfg = ExperimentConfig(utterances=(str(tmp_path / "u.wav"),) * 2, pool_size=2, duration_s=0.5)
    assert utterance(cfg, 0).samples.size == 8000
    assert fit_length(Waveform(np.ones(10), 10.0), 0.5).samples.size == 5


def test_prepare_source_is_accurate():
    s = prepare_source(SMALL, 1)
    assert abs(np.rad2deg(s.localization.azimuth_rad[0]) - 30.0) < 2.0
    assert s.init_er.comb.has_reflection and not s.init_direct.comb.has_reflection


@pytest.fixture(scope="module")
def small_run():
    return run_experiment(SMALL, workers=1)


def test_small_run(small_run):
    scores = small_run.scores
    assert len(scores) == 18 and all(s.ok for s in scores)
    rep = small_run.report()
    assert rep.mean_sdr_db["oracle"] > rep.mean_sdr_db["messl"] > rep.mean_sdr_db["random"]
    assert set(rep.ttests) == {"oracle", "random"}
    assert all(t["pvalue"] is not None for t in rep.ttests.values())
    for r in small_run.results:
        trace = r.diagnostics["messl"]["loglik_trace"]
        assert len(trace) == 16


def test_parallel_matches_serial(small_run):
    par = run_experiment(SMALL, workers=2, limit=3)
    assert par.scores == small_run.scores[:9]


def test_seed_changes_scenes():
    a = enumerate_scenes(SMALL)
    b = enumerate_scenes(ExperimentConfig(**{**SMALL.__dict__, "seed": 1}))
    assert [s.seed for s in a] != [s.seed for s in b]
