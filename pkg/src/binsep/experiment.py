"""Seeded benchmark scenes: synthesis, initialization, separation and scoring."""

from __future__ import annotations

import hashlib
import itertools
import json
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import __version__
from .acoustics import (ArraySpec, Brir, HeadGeometry, Plane, RoomSpec, direct_path_reference, source_position,
                        synthesize_array_rirs, synthesize_brir)
from .dsp import StftParams, Waveform, stft
from .em import VARIANTS, EmConfig, SourceInit, apply_masks, run_em
from .evaluation import SeparationScore, aggregate, mixture_count, oracle_masks, random_masks, sdr
from .localization import LocalizationResult, anechoic_brir, init_comb_params, init_ild_prior, localize
from .mixture import MixtureScene, interaural_spectrogram, render_images, render_mixture, rms_normalize
from .models import dump_matrix, ic_mask
from .speech import load_utterance, synthetic_utterance

METHODS = VARIANTS + ("oracle", "random")


@dataclass(frozen=True)
class ExperimentConfig:
    angles_deg: tuple = (0.0, 30.0, -30.0, 60.0, -60.0)
    sources: int = 2
    per_combination: int = 3
    methods: tuple = METHODS
    rt60_s: float = 0.3
    tail_gain: float = 0.04
    tail_onset_s: float = 0.01
    reflector: str = "floor"  # or "wall"
    reflector_distance_m: float = 1.6
    reflection_coefficient: float = 0.8
    source_distance_m: float = 1.68
    sample_rate_hz: float = 16000.0
    duration_s: float = 3.0
    tir_db: float = 0.0
    snr_db: float | None = None
    kappa: float = 0.5
    stft: StftParams = StftParams()
    em: EmConfig = EmConfig()
    utterances: tuple = ()  # WAV paths; empty means the synthetic pool
    pool_size: int = 15
    reference_window_ms: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if len(set(self.angles_deg)) != len(self.angles_deg):
            raise ValueError("loudspeaker angles must be distinct")
        if not 1 <= self.sources <= len(self.angles_deg):
            raise ValueError("source count must lie between 1 and the number of angles")
        if self.per_combination < 1:
            raise ValueError("per_combination must be >= 1")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")
        if self.reflector not in ("floor", "wall"):
            raise ValueError("reflector must be 'floor' or 'wall'")
        for p in self.utterances:
            if not os.path.exists(p):
                raise FileNotFoundError(p)

    @property
    def scene_count(self) -> int:
        return mixture_count(len(self.angles_deg), self.sources, self.per_combination)

    def room(self, angle_index: int) -> RoomSpec:
        if self.reflector == "floor":
            plane = Plane.floor(self.reflector_distance_m, self.reflection_coefficient)
        else:
            plane = Plane.side_wall(-self.reflector_distance_m, self.reflection_coefficient)
        return RoomSpec((plane,), self.rt60_s, self.tail_onset_s, self.seed * 1000 + angle_index, self.tail_gain)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stft"] = self.stft.to_dict()
        d["em"] = self.em.to_dict()
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "stft" in d:
            d["stft"] = StftParams(**d["stft"])
        if "em" in d:
            d["em"] = EmConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d["em"].items()})
        for k in ("angles_deg", "methods", "utterances"):
            if k in d:
                d[k] = tuple(d[k])
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys {sorted(extra)}")
        return cls(**d)


@dataclass(frozen=True)
class SceneSpec:
    scene_id: str
    index: int
    angle_indices: tuple  # target first
    utterance_indices: tuple
    seed: int


def enumerate_scenes(config: ExperimentConfig) -> list[SceneSpec]:
    """All source-angle subsets times ``per_combination`` draws; the target rotates through the subset."""
    scenes = []
    pool = len(config.utterances) or config.pool_size
    if pool < config.sources:
        raise ValueError("utterance pool smaller than the number of sources")
    combos = list(itertools.combinations(range(len(config.angles_deg)), config.sources))
    for combo in combos:
        for u in range(config.per_combination):
            idx = len(scenes)
            rng = np.random.default_rng([config.seed, idx])
            target = combo[u % len(combo)]
            order = (target,) + tuple(a for a in combo if a != target)
            utts = tuple(int(i) for i in rng.choice(pool, config.sources, replace=False))
            scenes.append(SceneSpec(f"s{idx:04d}", idx, order, utts, int(config.seed * 100003 + idx)))
    return scenes


def _quiet(fn, *args, **kwargs):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return fn(*args, **kwargs)


def source_brir(config: ExperimentConfig, angle_index: int, head: HeadGeometry = HeadGeometry()) -> Brir:
    pos = source_position(config.angles_deg[angle_index], config.source_distance_m)
    return _quiet(synthesize_brir, config.room(angle_index), pos, head, config.sample_rate_hz)


def source_array_rirs(config: ExperimentConfig, angle_index: int, array: ArraySpec = ArraySpec.ring()):
    pos = source_position(config.angles_deg[angle_index], config.source_distance_m)
    return _quiet(synthesize_array_rirs, config.room(angle_index), pos, array, config.sample_rate_hz)


def utterance(config: ExperimentConfig, index: int) -> Waveform:
    if config.utterances:
        return load_utterance(config.utterances[index], config.duration_s, config.sample_rate_hz)
    return synthetic_utterance(config.seed * 7919 + index, config.duration_s, config.sample_rate_hz)


@dataclass
class SourceSetup:
    brir: Brir
    localization: LocalizationResult
    init_er: SourceInit
    init_direct: SourceInit


def prepare_source(config: ExperimentConfig, angle_index: int, head: HeadGeometry = HeadGeometry()) -> SourceSetup:
    brir = source_brir(config, angle_index, head)
    loc = localize(source_array_rirs(config, angle_index), ArraySpec.ring())
    comb = init_comb_params(loc, head, brir)
    freqs = config.stft.frequencies(config.sample_rate_hz)
    ild, var = init_ild_prior(anechoic_brir(loc.azimuth_rad[0], loc.radius_m[0], head, config.sample_rate_hz), freqs)
    return SourceSetup(brir, loc, SourceInit(comb, ild, float(var[0])),
                       SourceInit(comb.direct_only(), ild, float(var[0])))


@dataclass
class SceneResult:
    scores: list
    diagnostics: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)


@dataclass
class RenderedScene:
    scene: MixtureScene
    images: np.ndarray  # (L, 2, n) per-source ear images
    left: Waveform
    right: Waveform
    references: list  # target direct-path reference per ear
    angles_deg: list


def render_scene(config: ExperimentConfig, spec: SceneSpec, setups: dict) -> RenderedScene:
    for a in spec.angle_indices:
        if a not in setups:
            setups[a] = prepare_source(config, a)
    utts = [utterance(config, i) for i in spec.utterance_indices]
    scene = MixtureScene([(u, setups[a].brir) for u, a in zip(utts, spec.angle_indices)],
                         config.tir_db, config.snr_db, spec.seed)
    images = render_images(scene)
    left, right = render_mixture(scene, images)
    # reference: target utterance through the direct-path part of its BRIR
    ref_ir = direct_path_reference(setups[spec.angle_indices[0]].brir, config.reference_window_ms).render_array()
    dry = scene.gains()[0] * rms_normalize(utts[0]).samples
    refs = [np.convolve(dry, ref_ir[e])[:left.samples.size] for e in range(2)]
    return RenderedScene(scene, images, left, right, refs, [config.angles_deg[a] for a in spec.angle_indices])


def run_scene(config: ExperimentConfig, spec: SceneSpec, setups: dict | None = None,
              mask_sink=None) -> SceneResult:
    """Separate the target of one scene with every configured method.

    ``mask_sink(scene_id, method, mask)`` receives each target mask when given.
    """
    setups = setups if setups is not None else {}
    rs = render_scene(config, spec, setups)
    images, left, refs, angles = rs.images, rs.left, rs.references, rs.angles_deg
    fs = config.sample_rate_hz
    lspec, rspec = stft(left, config.stft), stft(rs.right, config.stft)
    obs = interaural_spectrogram(lspec, rspec)
    ic = ic_mask(lspec, rspec, config.kappa) if any(m in ("ic-messl", "eric-messl") for m in config.methods) else None
    scores, diags, timings = [], {}, {}
    interferer = angles[1] if len(angles) > 1 else float("nan")
    for method in config.methods:
        t0 = time.perf_counter()
        status = "ok"
        try:
            if method in VARIANTS:
                em_cfg = replace(config.em, variant=method, seed=spec.seed)
                er = method in ("er-messl", "eric-messl")
                inits = [setups[a].init_er if er else setups[a].init_direct for a in spec.angle_indices]
                masks, state = run_em(obs, inits, em_cfg, ic=ic)
                diags[method] = state.diagnostics()
                target_mask = masks[0]
            elif method == "oracle":
                per_source = [[stft(Waveform(images[l, e], fs), config.stft) for e in range(2)]
                              for l in range(images.shape[0])]
                target_mask = oracle_masks(per_source)[0]
            else:
                target_mask = random_masks(*obs.shape, seed=spec.seed)[0]
            if mask_sink is not None:
                mask_sink(spec.scene_id, method, target_mask)
            est = apply_masks(lspec, rspec, [target_mask])[0]
            sdrs = [sdr(est[e], refs[e]) for e in range(2)]
        except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
            status = f"failed: {exc}"
            sdrs = [float("nan"), float("nan")]
        timings[method] = time.perf_counter() - t0
        scores.append(SeparationScore(spec.scene_id, method, float(angles[0]), float(interferer),
                                      float(sdrs[0]), float(sdrs[1]), spec.seed, status))
    return SceneResult(scores, diags, timings)


def _mask_writer(mask_dir):
    if mask_dir is None:
        return None

    def write(scene_id, method, mask):
        dump_matrix(mask.values, os.path.join(mask_dir, f"{scene_id}_{method}.f32"),
                    {"source_id": mask.source_id, "scene_id": scene_id, "method": method})
    return write


def _run_chunk(args):
    config, specs, mask_dir = args
    setups, sink = {}, _mask_writer(mask_dir)
    return [run_scene(config, s, setups, sink) for s in specs]


def worker_count(default: int = 1) -> int:
    value = os.environ.get("BINSEP_THREADS")
    if value is None:
        return default
    try:
        n = int(value)
    except ValueError:
        raise ValueError(f"BINSEP_THREADS must be an integer, got {value!r}") from None
    return max(1, n)


@dataclass
class ExperimentOutcome:
    config: ExperimentConfig
    scenes: list
    results: list
    wall_clock_s: float

    @property
    def scores(self) -> list:
        return [s for r in self.results for s in r.scores]

    def report(self, baseline: str = "messl"):
        return aggregate(self.scores, baseline, self.config.scene_count)

    def manifest(self) -> dict:
        return {"config_sha256": self.config.digest(), "version": __version__,
                "scene_count": len(self.scenes), "wall_clock_s": self.wall_clock_s,
                "stage_seconds": {m: float(sum(r.timings.get(m, 0.0) for r in self.results))
                                  for m in self.config.methods}}


def run_experiment(config: ExperimentConfig, workers: int | None = None, limit: int | None = None,
                   progress=None, mask_dir=None) -> ExperimentOutcome:
    """Run every scene (or the first ``limit``); scenes are split across worker processes."""
    t0 = time.perf_counter()
    scenes = enumerate_scenes(config)
    if limit is not None:
        scenes = scenes[:limit]
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(scenes) <= 1:
        setups, results, sink = {}, [], _mask_writer(mask_dir)
        for s in scenes:
            results.append(run_scene(config, s, setups, sink))
            if progress:
                progress(s, results[-1])
    else:
        chunks = [scenes[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(_run_chunk, [(config, c, mask_dir) for c in chunks if c]))
        by_index = {}
        for chunk, res in zip([c for c in chunks if c], parts):
            for s, r in zip(chunk, res):
                by_index[s.index] = r
        results = [by_index[s.index] for s in scenes]
    return ExperimentOutcome(config, scenes, results, time.perf_counter() - t0)

