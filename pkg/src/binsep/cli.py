"""Command-line driver: synth, mix, separate, experiment.

Exit codes: 0 success, 2 bad input, 64 usage error, 70 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .acoustics import ArraySpec, save_brir
from .dsp import StftParams, Waveform, read_wav, stft, write_wav
from .em import VARIANTS, EmConfig, SourceInit, apply_masks, export_mask, run_em, write_diagnostics, write_pgm
from .evaluation import oracle_masks, random_masks, scores_to_csv
from .experiment import (METHODS, ExperimentConfig, enumerate_scenes, render_scene, run_experiment,
                         source_array_rirs, source_brir)
from .mixture import interaural_spectrogram
from .models import CombParams, ic_mask

EXIT_OK, EXIT_BAD_INPUT, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 64, 70


class UsageError(Exception):
    pass


class BadInput(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _load_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise BadInput(f"cannot read {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise BadInput(f"{path}: expected a JSON object")
    return data


def _load_config(path, seed: int | None) -> ExperimentConfig:
    data = _load_json(path) if path else {}
    try:
        cfg = ExperimentConfig.from_dict(data)
    except (TypeError, ValueError, FileNotFoundError) as exc:
        raise BadInput(f"invalid config: {exc}") from exc
    return replace(cfg, seed=seed) if seed is not None else cfg


def _write_json(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True))


def cmd_synth(args) -> int:
    cfg = _load_config(args.config, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    array = ArraySpec.ring()
    files = []
    for i, angle in enumerate(cfg.angles_deg):
        brir = source_brir(cfg, i)
        sidecar = save_brir(brir, out / f"brir_{i:02d}.wav")
        rirs = source_array_rirs(cfg, i, array)
        write_wav(out / f"array_{i:02d}.wav", rirs, cfg.sample_rate_hz)
        _write_json(out / f"array_{i:02d}.json", {
            "angle_deg": angle, "positions_m": array.positions.tolist(), "reference": list(array.reference),
            "source_m": brir.geometry["source"], "rt60_s": cfg.rt60_s, "seed": cfg.room(i).noise_seed})
        files.append({"angle_deg": angle, "brir": f"brir_{i:02d}.wav", "sidecar": sidecar.name,
                      "array": f"array_{i:02d}.wav"})
    _write_json(out / "manifest.json", {"config_sha256": cfg.digest(), "version": __version__, "files": files})
    return EXIT_OK


def cmd_mix(args) -> int:
    """Render one benchmark scene: mixture WAV, per-source images and an init JSON for ``separate``."""
    cfg = _load_config(args.config, args.seed)
    scenes = enumerate_scenes(cfg)
    if not 0 <= args.scene < len(scenes):
        raise BadInput(f"scene index {args.scene} outside [0, {len(scenes)})")
    spec = scenes[args.scene]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    setups = {}
    rs = render_scene(cfg, spec, setups)
    fs = cfg.sample_rate_hz
    write_wav(out / "mixture.wav", [rs.left, rs.right], fs)
    images = []
    for l in range(rs.images.shape[0]):
        name = f"image_{l}.wav"
        write_wav(out / name, [rs.images[l, 0, :rs.left.samples.size], rs.images[l, 1, :rs.left.samples.size]], fs)
        images.append(name)
    write_wav(out / "reference.wav", rs.references, fs)
    sources = []
    for a in spec.angle_indices:
        s = setups[a]
        s.localization.save(out / f"localization_{a:02d}.json")
        sources.append({"angle_deg": cfg.angles_deg[a], "comb": s.init_er.comb.to_dict(),
                        "ild_mean_db": s.init_er.ild_mean_db.tolist(), "ild_var": s.init_er.ild_var})
    _write_json(out / "init.json", {"scene_id": spec.scene_id, "seed": spec.seed, "sources": sources,
                                    "images": images, "stft": cfg.stft.to_dict(), "kappa": cfg.kappa,
                                    "em": cfg.em.to_dict()})
    return EXIT_OK


def _parse_init(data: dict, base: Path):
    try:
        sources = data["sources"]
        if not isinstance(sources, list) or not sources:
            raise ValueError("'sources' must be a non-empty list")
        inits = []
        for s in sources:
            comb = CombParams.from_dict(s["comb"])
            ild = None if s.get("ild_mean_db") is None else np.asarray(s["ild_mean_db"], float)
            inits.append(SourceInit(comb, ild, s.get("ild_var")))
        params = StftParams(**data.get("stft", {}))
        em = {k: tuple(v) if isinstance(v, list) else v for k, v in data.get("em", {}).items()}
        em_cfg = EmConfig(**em)
        images = [base / p for p in data.get("images", [])]
        return inits, params, float(data.get("kappa", 0.5)), em_cfg, images
    except (KeyError, TypeError, ValueError) as exc:
        raise BadInput(f"malformed init JSON: {exc}") from exc


def cmd_separate(args) -> int:
    init_path = Path(args.init)
    inits, params, kappa, em_cfg, images = _parse_init(_load_json(init_path), init_path.parent)
    try:
        chans, fs = read_wav(args.mixture)
    except (OSError, ValueError) as exc:
        raise BadInput(f"cannot read mixture: {exc}") from exc
    if len(chans) != 2:
        raise BadInput("mixture must be a stereo WAV")
    try:
        lspec, rspec = stft(chans[0], params), stft(chans[1], params)
    except ValueError as exc:
        raise BadInput(str(exc)) from exc
    for init in inits:
        if init.ild_mean_db is not None and init.ild_mean_db.size != params.n_bins:
            raise BadInput("ILD prior length does not match the STFT bin count")
    obs = interaural_spectrogram(lspec, rspec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    method = args.method
    state = None
    if method in VARIANTS:
        cfg = replace(em_cfg, variant=method)
        ic = ic_mask(lspec, rspec, kappa) if cfg.uses_ic else None
        masks, state = run_em(obs, inits, cfg, ic=ic)
    elif method == "oracle":
        if len(images) != len(inits):
            raise BadInput("oracle separation needs one clean image WAV per source in the init JSON")
        try:
            per_source = [[stft(c, params) for c in read_wav(p)[0][:2]] for p in images]
        except (OSError, ValueError) as exc:
            raise BadInput(f"cannot read source images: {exc}") from exc
        masks = oracle_masks(per_source)
    else:
        if len(inits) != 2:
            raise BadInput("random masks are defined for two sources")
        masks = random_masks(*obs.shape, seed=args.seed if args.seed is not None else 0)
    separated = apply_masks(lspec, rspec, [m for m in masks if m.emitting])
    for m, (left, right) in zip([m for m in masks if m.emitting], separated):
        write_wav(out / f"source_{m.source_id}.wav", [left, right], fs)
    for m in masks:
        name = "garbage" if m.is_garbage else f"source_{m.source_id}"
        export_mask(m, out / f"mask_{name}.f32")
        if args.pgm:
            write_pgm(m.values, out / f"mask_{name}.pgm")
    extra = {"method": method, "frames": obs.shape[0], "bins": obs.shape[1]}
    if state is not None:
        write_diagnostics(state, out / "diagnostics.json", extra)
    else:
        _write_json(out / "diagnostics.json", extra)
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = _load_config(args.config, args.seed)
    if args.methods:
        methods = tuple(m.strip() for m in args.methods.split(","))
        unknown = set(methods) - set(METHODS)
        if unknown:
            raise BadInput(f"unknown methods {sorted(unknown)}")
        cfg = replace(cfg, methods=methods)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mask_dir = None
    if args.save_masks:
        mask_dir = out / "masks"
        mask_dir.mkdir(exist_ok=True)
    t0 = time.perf_counter()
    outcome = run_experiment(cfg, workers=args.workers, limit=args.limit,
                             mask_dir=None if mask_dir is None else str(mask_dir))
    (out / "scores.csv").write_text(scores_to_csv(outcome.scores))
    report = outcome.report().to_dict()
    report["config"] = cfg.to_dict()
    _write_json(out / "report.json", report)
    manifest = outcome.manifest()
    manifest["artifacts"] = {"scores": "scores.csv", "report": "report.json",
                             "masks": None if mask_dir is None else "masks"}
    manifest["total_seconds"] = time.perf_counter() - t0
    _write_json(out / "manifest.json", manifest)
    failed = sum(1 for s in outcome.scores if not s.ok)
    if failed:
        print(f"{failed} scene/method runs failed; see report.json", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="binsep", description="Binaural source separation toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="synthesize BRIRs and array RIRs for every configured angle")
    s.add_argument("--config", help="experiment config JSON (defaults if omitted)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("mix", help="render one benchmark scene and its initialization")
    s.add_argument("--config")
    s.add_argument("--scene", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_mix)

    s = sub.add_parser("separate", help="separate a stereo mixture")
    s.add_argument("--mixture", required=True)
    s.add_argument("--init", required=True, help="initialization JSON")
    s.add_argument("--method", required=True, choices=METHODS)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--pgm", action="store_true", help="also write 8-bit PGM mask images")
    s.set_defaults(func=cmd_separate)

    s = sub.add_parser("experiment", help="run the seeded benchmark")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--methods", help="comma-separated subset of methods")
    s.add_argument("--limit", type=int, help="only run the first N scenes")
    s.add_argument("--workers", type=int, help="worker processes (default: BINSEP_THREADS or 1)")
    s.add_argument("--save-masks", action="store_true")
    s.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"binsep: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except BadInput as exc:
        print(f"binsep: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"binsep: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        print(f"binsep: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
