"""Command-line interface: gen, perturb, refine, evaluate, report.

Exit codes: 0 success, 1 unexpected failure, 2 configuration or input error,
3 I/O error, 4 rig mismatch between scenes, 5 non-finite training loss.
Human-readable logs go to stderr; stdout stays empty unless
``--print-report`` is given.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import shutil
import sys
import traceback
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import checkpoint
from .corrections import CorrectionSet, apply_corrections
from .dataset import (
    PRESETS,
    LidarSpec,
    NoiseSpec,
    TrajectorySpec,
    WorldSpec,
    capture,
    default_rig,
    generate_tracks,
    generate_trajectory,
    generate_world,
    perturb_collection,
    read_dataset,
    read_ground_truth,
    scene_dirs,
    split_subsequences,
    write_dataset,
    write_poses,
)
from .dataset.io import is_scene_dir, read_poses
from .errors import NonFiniteLoss, NotGroundTruth, RigMismatch
from .evaluation import build_report, evaluate_scene, format_report, read_report, write_report
from .optimizer import TrainConfig, field_bounds, run_calibration_stage, run_trajectory_stage

log = logging.getLogger("rigrefine")

CONFIG_VERSION = 1
SEED_ENV = "RIG_REFINE_SEED"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_RIG_MISMATCH = 4
EXIT_NONFINITE = 5


class ConfigError(Exception):
    pass


class InputError(Exception):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

GEN_DEFAULTS = {
    "world": {},
    "trajectory": {},
    "rig": {"image_size": 256},
    "lidar": {},
    "frame_rate": 5.0,
    "subsequence_m": None,
    "tracks": {"n_landmarks": 300, "pixel_noise": 0.0},
    "name": "scene",
}


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as f:
            cfg = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    if cfg.get("version") != CONFIG_VERSION:
        raise ConfigError(f"config version must be {CONFIG_VERSION}, got {cfg.get('version')!r}")
    return cfg


def resolve_seed(flag, file_cfg: dict) -> int:
    """flag > config file > RIG_REFINE_SEED > 0."""
    if flag is not None:
        return int(flag)
    if file_cfg.get("seed") is not None:
        return int(file_cfg["seed"])
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
    return 0


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def train_config(args, file_cfg: dict, seed: int) -> TrainConfig:
    d = dict(file_cfg.get("train", {}))
    flag_map = {
        "epochs": "epochs", "nvs_epochs": "nvs_epochs", "steps_per_epoch": "steps_per_epoch",
        "rays_per_batch": "rays_per_batch", "downscale": "downscale", "n_samples": "n_samples",
        "threads": "threads", "lr_field": "lr_field", "lr_extrinsic": "lr_extrinsic",
        "lr_trajectory": "lr_trajectory", "depth_weight": "depth_weight", "photo_weight": "photo_weight",
    }
    for flag, key in flag_map.items():
        val = getattr(args, flag, None)
        if val is not None:
            d[key] = val
    if file_cfg.get("threads") is not None and getattr(args, "threads", None) is None:
        d.setdefault("threads", file_cfg["threads"])
    if getattr(args, "deterministic", None):
        d["deterministic"] = True
    elif file_cfg.get("deterministic") is not None:
        d.setdefault("deterministic", bool(file_cfg["deterministic"]))
    d["seed"] = seed
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


# --------------------------------------------------------------------------
# staged output
# --------------------------------------------------------------------------


@contextmanager
def staged_output(final: Path, overwrite: bool = False):
    """Yield a staging directory that is renamed onto ``final`` only on success."""
    final = Path(final)
    if final.exists() and not overwrite:
        raise ConfigError(f"output {final} already exists (use --overwrite)")
    parent = final.parent
    try:
        parent.mkdir(parents=True, exist_ok=True)
        stage = parent / f".{final.name}.staging-{os.getpid()}"
        if stage.exists():
            shutil.rmtree(stage)
        stage.mkdir()
    except OSError as exc:
        raise OSError(f"cannot create output next to {final}: {exc}") from exc
    try:
        yield stage
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    old = None
    if final.exists():
        old = parent / f".{final.name}.old-{os.getpid()}"
        os.rename(final, old)
    os.rename(stage, final)
    if old is not None:
        shutil.rmtree(old, ignore_errors=True)


def _check_input(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"input {p} does not exist")
    return p


def _read_scenes(path):
    p = _check_input(path)
    try:
        dirs = scene_dirs(p)
    except FileNotFoundError as exc:
        raise InputError(str(exc)) from exc
    return dirs, [read_dataset(d) for d in dirs]


def _out_scene_dir(root: Path, input_root: Path, scene_dir: Path) -> Path:
    return root if is_scene_dir(input_root) else root / scene_dir.name


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gen(args, file_cfg) -> int:
    seed = resolve_seed(args.seed, file_cfg)
    g = _merge(GEN_DEFAULTS, file_cfg.get("gen", {}))
    if args.duration is not None:
        g["trajectory"] = {**g["trajectory"], "duration": args.duration}
    if args.image_size is not None:
        g["rig"] = {**g["rig"], "image_size": args.image_size}
    if args.subsequence_m is not None:
        g["subsequence_m"] = args.subsequence_m
    if args.landmarks is not None:
        g["tracks"] = {**g["tracks"], "n_landmarks": args.landmarks}
    if args.pixel_noise is not None:
        g["tracks"] = {**g["tracks"], "pixel_noise": args.pixel_noise}
    if args.name is not None:
        g["name"] = args.name
    try:
        wspec = WorldSpec.from_dict(g["world"])
        tspec = TrajectorySpec(**g["trajectory"])
        lspec = LidarSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in g["lidar"].items()})
        rig = default_rig(**g["rig"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad gen config: {exc}") from exc
    world = generate_world(wspec, seed=seed)
    traj = generate_trajectory(tspec, seed=seed, reference=rig.reference)
    log.info("capturing %s: %.1f s at %d px", g["name"], tspec.duration, rig.intrinsics(rig.cameras[0]).width)
    ds = capture(world, rig, traj, frame_rate=float(g["frame_rate"]), lidar_spec=lspec, name=g["name"])
    tracks = generate_tracks(world, ds, n_landmarks=int(g["tracks"]["n_landmarks"]),
                             pixel_noise=float(g["tracks"]["pixel_noise"]), seed=seed)
    ds = dataclasses.replace(ds, tracks=tracks)
    with staged_output(Path(args.output), args.overwrite) as stage:
        if g["subsequence_m"]:
            for sub in split_subsequences(ds, float(g["subsequence_m"])):
                write_dataset(sub, stage / sub.name)
        else:
            write_dataset(ds, stage)
    log.info("wrote %s", args.output)
    return EXIT_OK


def cmd_perturb(args, file_cfg) -> int:
    seed = resolve_seed(args.seed, file_cfg)
    p = dict(file_cfg.get("perturb", {}))
    preset = args.preset or p.pop("preset", None)
    p.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        base = PRESETS[preset].to_dict()
    else:
        base = NoiseSpec().to_dict()
    base.update(p)
    for flag in ("ext_translation_m", "ext_rotation_deg", "ext_mode", "traj_amplitude_m", "traj_amplitude_deg",
                 "traj_frequency", "traj_jitter_m"):
        val = getattr(args, flag)
        if val is not None:
            base[flag] = val
    base["seed"] = seed
    try:
        noise = NoiseSpec.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad noise spec: {exc}") from exc
    root = _check_input(args.input)
    dirs, scenes = _read_scenes(root)
    try:
        pairs = perturb_collection(scenes, noise)
    except NotGroundTruth as exc:
        raise InputError(f"{exc}; perturb needs a ground-truth dataset") from exc
    with staged_output(Path(args.output), args.overwrite) as stage:
        for d, (ds, rec) in zip(dirs, pairs):
            write_dataset(ds, _out_scene_dir(stage, root, d), gt=rec)
    log.info("perturbed %d scene(s) with %s", len(scenes), json.dumps(noise.to_dict(), sort_keys=True))
    return EXIT_OK


def _shared_rig(scenes):
    calib = scenes[0].rig
    for ds in scenes[1:]:
        if not ds.rig.same_layout(calib):
            raise RigMismatch(f"scene {ds.name!r} uses a different rig layout")
        for s in calib.ids:
            if not ds.rig.extrinsic(s).allclose(calib.extrinsic(s), atol=1e-9):
                raise RigMismatch(f"scene {ds.name!r} has a different extrinsic for {s!r}")
    return calib


def cmd_refine(args, file_cfg) -> int:
    seed = resolve_seed(args.seed, file_cfg)
    cfg = train_config(args, file_cfg, seed)
    root = _check_input(args.input)
    dirs, scenes = _read_scenes(root)
    names = [ds.name for ds in scenes]
    if len(set(names)) != len(names):
        raise InputError("scene names must be unique")
    calib = _shared_rig(scenes)
    out = Path(args.output)
    progress = sys.stderr
    with staged_output(out, args.overwrite) as stage:
        try:
            stage1 = run_calibration_stage(scenes, calib, cfg, progress=progress)
        except NonFiniteLoss as exc:
            _dump_nonfinite(out, exc, cfg)
            raise
        corr = stage1.corrections
        summary = {"version": 1, "config": cfg.to_dict(), "stage": args.stage, "scenes": names,
                   "calibration": stage1.summary(), "trajectory": {}}
        for k, (d, ds) in enumerate(zip(dirs, scenes)):
            scene_out = _out_scene_dir(stage, root, d)
            if args.stage == "calib-only":
                rig, _ = apply_corrections(calib, ds.trajectory, _ext_only(corr))
                scene_out.mkdir(parents=True, exist_ok=True)
                write_poses(scene_out, rig, ds.trajectory, {"provenance": "refined", "name": ds.name})
                # trajectory left byte-identical to the input
                shutil.copyfile(d / "trajectory.csv", scene_out / "trajectory.csv")
                continue
            try:
                s2 = run_trajectory_stage(ds, calib, corr, cfg, index=k, field_init=stage1.fields[ds.name],
                                          net_init=corr.trajectory[ds.name], progress=progress)
            except NonFiniteLoss as exc:
                _dump_nonfinite(out, exc, cfg)
                raise
            corr.trajectory[ds.name] = s2.corrections.trajectory[ds.name]
            summary["trajectory"][ds.name] = s2.summary()
            rig, traj = apply_corrections(calib, ds.trajectory, corr, scene=ds.name)
            write_poses(scene_out, rig, traj, {"provenance": "refined", "name": ds.name})
        checkpoint.save(stage / "checkpoint.rrck", corr.blocks())
        with open(stage / "summary.json", "w") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
            f.write("\n")
    log.info("refined %d scene(s) -> %s", len(scenes), out)
    return EXIT_OK


def _ext_only(corr: CorrectionSet) -> CorrectionSet:
    c = CorrectionSet(corr.sensors, corr.reference)
    for s in corr.sensors:
        c.set_extrinsic_vector(s, corr.extrinsic[s].vector)
    return c


def _dump_nonfinite(out: Path, exc: Exception, cfg: TrainConfig) -> None:
    path = out.parent / f"{out.name}.nonfinite.json"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump({"error": str(exc), "config": cfg.to_dict(), "traceback": traceback.format_exc()}, f, indent=2)
        log.error("non-finite loss; diagnostics written to %s", path)
    except OSError:
        log.error("non-finite loss; could not write diagnostics")


def cmd_evaluate(args, file_cfg) -> int:
    seed = resolve_seed(args.seed, file_cfg)
    cfg = train_config(args, file_cfg, seed)
    ecfg = dict(file_cfg.get("evaluate", {}))
    threshold = float(args.threshold if args.threshold is not None else ecfg.get("threshold", 0.15))
    skip = tuple(args.skip or ecfg.get("skip", ()))
    root = _check_input(args.dataset)
    cand_root = _check_input(args.candidate)
    dirs, scenes = _read_scenes(root)
    entries = []
    for k, (d, ds) in enumerate(zip(dirs, scenes)):
        cdir = _out_scene_dir(cand_root, root, d)
        if not (cdir / "rig.json").exists() or not (cdir / "trajectory.csv").exists():
            raise InputError(f"candidate poses for scene {ds.name!r} missing under {cdir}")
        c_rig, c_traj = read_poses(cdir)
        if not c_rig.same_layout(ds.rig):
            raise RigMismatch(f"candidate rig for {ds.name!r} does not match the dataset rig")
        gt = read_ground_truth(d)
        bounds = field_bounds(ds, ds.rig, ds.trajectory, cfg.field_margin)
        log.info("evaluating %s", ds.name)
        orig = evaluate_scene(ds, ds.rig, ds.trajectory, cfg, gt=gt, index=k, bounds=bounds, threshold=threshold,
                              skip=skip)
        opt = evaluate_scene(ds, c_rig, c_traj, cfg, gt=gt, index=k, bounds=bounds, threshold=threshold, skip=skip)
        entries.append({"scene": ds.name, "original": orig, "optimized": opt})
    report = build_report(entries)
    with staged_output(Path(args.output), args.overwrite) as stage:
        write_report(report, stage)
    if args.print_report:
        print(format_report(report))
    return EXIT_OK


def cmd_report(args, file_cfg) -> int:
    src = _check_input(args.report)
    try:
        report = read_report(src)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read report {src}: {exc}") from exc
    if args.output is not None:
        with staged_output(Path(args.output), args.overwrite) as stage:
            write_report(report, stage)
    if args.print_report or args.output is None:
        print(format_report(report))
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (flags override its values)")
    p.add_argument("--seed", type=int, help=f"global seed (fallback: ${SEED_ENV}, then 0)")
    p.add_argument("--log-level", default=None, choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    p.add_argument("--overwrite", action="store_true", help="replace an existing output directory")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--nvs-epochs", type=int)
    p.add_argument("--steps-per-epoch", type=int)
    p.add_argument("--rays-per-batch", type=int)
    p.add_argument("--downscale", type=int)
    p.add_argument("--n-samples", type=int)
    p.add_argument("--lr-field", type=float)
    p.add_argument("--lr-extrinsic", type=float)
    p.add_argument("--lr-trajectory", type=float)
    p.add_argument("--photo-weight", type=float)
    p.add_argument("--depth-weight", type=float)
    p.add_argument("--threads", type=int, help="worker cap for per-scene training")
    p.add_argument("--deterministic", action="store_true", help="force deterministic reductions")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rigrefine", description="Rig extrinsic and trajectory refinement.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic ground-truth dataset")
    p.add_argument("output")
    p.add_argument("--duration", type=float, help="trajectory duration, s")
    p.add_argument("--image-size", type=int)
    p.add_argument("--subsequence-m", type=float, help="split into subsequences of this arc length")
    p.add_argument("--landmarks", type=int)
    p.add_argument("--pixel-noise", type=float)
    p.add_argument("--name")
    _common(p)

    p = sub.add_parser("perturb", help="inject pose noise into a ground-truth dataset")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--ext-translation-m", type=float)
    p.add_argument("--ext-rotation-deg", type=float)
    p.add_argument("--ext-mode", choices=["uniform", "sphere"])
    p.add_argument("--traj-amplitude-m", type=float)
    p.add_argument("--traj-amplitude-deg", type=float)
    p.add_argument("--traj-frequency", type=float)
    p.add_argument("--traj-jitter-m", type=float)
    _common(p)

    p = sub.add_parser("refine", help="jointly refine extrinsics and trajectories")
    p.add_argument("input", help="scene directory or collection of scenes sharing a rig")
    p.add_argument("output")
    p.add_argument("--stage", choices=["all", "calib-only"], default="all")
    _train_flags(p)
    _common(p)

    p = sub.add_parser("evaluate", help="compare original and candidate poses")
    p.add_argument("dataset")
    p.add_argument("candidate", help="directory with refined rig.json/trajectory.csv per scene")
    p.add_argument("output")
    p.add_argument("--threshold", type=float, help="point-to-mesh inlier distance, m")
    p.add_argument("--skip", action="append", choices=["tracks", "nvs", "geometry"])
    p.add_argument("--print-report", action="store_true")
    _train_flags(p)
    _common(p)

    p = sub.add_parser("report", help="re-render an existing report.json")
    p.add_argument("report", help="report.json or the directory holding it")
    p.add_argument("--output", help="directory for regenerated report.json/report.csv")
    p.add_argument("--print-report", action="store_true")
    _common(p)
    return parser


COMMANDS = {"gen": cmd_gen, "perturb": cmd_perturb, "refine": cmd_refine, "evaluate": cmd_evaluate,
            "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        file_cfg = load_config(args.config)
        level = args.log_level or file_cfg.get("log_level", "INFO")
        logging.basicConfig(level=getattr(logging, str(level).upper(), logging.INFO), stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        np.seterr(all="ignore")
        return COMMANDS[args.command](args, file_cfg)
    except (ConfigError, InputError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except RigMismatch as exc:
        log.error("rig mismatch: %s", exc)
        return EXIT_RIG_MISMATCH
    except NonFiniteLoss as exc:
        log.error("%s", exc)
        return EXIT_NONFINITE
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
