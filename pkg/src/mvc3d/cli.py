"""Command-line entry point: ``mvc3d <command> [options]``.

Exit codes: 0 success, 2 bad input (a JSON error report goes to stderr),
3 numeric failure during training (a diagnostic checkpoint is written).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import tensor as T
from .config import PRESETS, TrainConfig, preset
from .dataset import build_ground_truth, load_ground_truth, pooled, save_ground_truth
from .losses import ConfigError, pcm, view_mask
from .model import forward, load_checkpoint, save_checkpoint
from .projection import backproject_3d_to_2d_mask, project_2d_to_3d
from .scene import Scene, SceneConfigError, SceneValidationError, gen_scene, render_views, to_pgm
from .tensor import FormatError, ShapeError
from .train import NumericError, evaluate, model_config, split_frames, train

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class InputError(Exception):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_config(args) -> TrainConfig:
    """Preset (or defaults), overlaid by the JSON config file, then ``--seed``."""
    base = preset(args.preset).to_dict() if args.preset else TrainConfig().to_dict()
    if args.config:
        try:
            with open(args.config) as fh:
                over = json.load(fh)
        except OSError as exc:
            raise InputError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise InputError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(over, dict):
            raise InputError("config must be a JSON object")
        base = _merge(base, over)
    cfg = TrainConfig.from_dict(base)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _out_dir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _write_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _load_scene(path: str) -> Scene:
    if not os.path.exists(path):
        raise InputError(f"scene file not found: {path}")
    return Scene.load(path)


def _load_gt(path: str):
    if not os.path.exists(os.path.join(path, "manifest.json")):
        raise InputError(f"no ground-truth manifest in {path}")
    return load_ground_truth(path)


# ---------------------------------------------------------------- commands

def cmd_gen_scene(args) -> int:
    cfg = load_config(args)
    scene = gen_scene(cfg.seed, cfg.scene)
    out = _out_dir(args)
    scene.save(os.path.join(out, "scene.json"))
    if args.images:
        for f in scene.frames:
            for i, img in enumerate(render_views(scene, f.frame_id)):
                with open(os.path.join(out, f"frame_{f.frame_id:05d}_view{i}.pgm"), "wb") as fh:
                    fh.write(to_pgm(img))
    print(json.dumps({"scene": os.path.join(out, "scene.json"), "frames": len(scene.frames)}))
    return EXIT_OK


def cmd_make_gt(args) -> int:
    cfg = load_config(args)
    scene = _load_scene(args.scene)
    vox = cfg.vox.spec()
    gts = build_ground_truth(scene, vox, cfg.sigma2, cfg.sigma3)
    save_ground_truth(_out_dir(args), gts, vox, cfg.sigma2, cfg.sigma3)
    print(json.dumps({"gt": args.out, "frames": len(gts), "people": sum(g.count for g in gts)}))
    return EXIT_OK


def _check_compatible(scene: Scene, gts, vox, cfg: TrainConfig) -> None:
    if vox != cfg.vox.spec():
        raise InputError("ground-truth voxel grid does not match the configuration")
    frame_ids = {f.frame_id for f in scene.frames}
    missing = [g.frame_id for g in gts if g.frame_id not in frame_ids]
    if missing:
        raise InputError(f"ground truth has frames not in the scene: {missing[:5]}")


def cmd_train(args) -> int:
    cfg = load_config(args)
    scene = _load_scene(args.scene)
    gts, vox, _ = _load_gt(args.gt)
    _check_compatible(scene, gts, vox, cfg)
    out = _out_dir(args)
    params = None
    if args.resume:
        params, _, _ = load_checkpoint(args.resume)
    stages = [args.stage] if args.stage else None
    log_path = os.path.join(out, "train_log.ndjson")
    with open(log_path, "a" if args.resume else "w") as fh:
        try:
            result = train(scene, gts, vox, cfg, log_file=fh, params=params, stages=stages)
        except NumericError as exc:
            # parameters are left as they were before the failing step
            diag = os.path.join(out, "diagnostic_checkpoint.zip")
            save_checkpoint(diag, exc.params, model_config(scene, cfg, vox), seed=cfg.seed, failed_step=exc.step)
            _error(EXIT_NUMERIC, "numeric", str(exc), step=exc.step, checkpoint=diag)
            return EXIT_NUMERIC
    ckpt = os.path.join(out, "checkpoint.zip")
    save_checkpoint(ckpt, result.params, result.model_cfg, seed=cfg.seed,
                    stage=stages[-1] if stages else len(cfg.stages), train_config=cfg.to_dict())
    print(json.dumps({"checkpoint": ckpt, "steps": len(result.history), "final_loss": result.final_loss}))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args)
    scene = _load_scene(args.scene)
    gts, vox, _ = _load_gt(args.gt)
    _check_compatible(scene, gts, vox, cfg)
    if args.frames == "test":
        _, gts = split_frames(gts, cfg)
        if not gts:
            raise InputError("no test frames: set train_frames below the frame count or use --frames all")
    predictions = None
    if args.checkpoint:
        params, mcfg, _ = load_checkpoint(args.checkpoint)
        if mcfg.vox != vox:
            raise InputError("checkpoint voxel grid does not match the ground truth")
    elif args.ground_truth_as_prediction:
        params = None
        mcfg = model_config(scene, cfg, vox)
        predictions = {g.frame_id: (g.volume, g.maps) for g in gts}
    else:
        raise InputError("eval needs --checkpoint or --ground-truth-as-prediction")
    metrics = evaluate(scene, gts, params, mcfg, cfg, predictions=predictions)
    path = os.path.join(_out_dir(args), "metrics.json")
    _write_json(path, metrics)
    print(json.dumps({k: v for k, v in metrics.items() if k != "per_frame"}, sort_keys=True))
    return EXIT_OK


def cmd_project(args) -> int:
    """Lifts each rendered view of a frame onto the voxel grid (debug dump)."""
    cfg = load_config(args)
    scene = _load_scene(args.scene)
    vox = cfg.vox.spec()
    out = _out_dir(args)
    try:
        images = render_views(scene, args.frame)
    except KeyError as exc:
        raise InputError(str(exc)) from exc
    paths = []
    for i, (img, cam) in enumerate(zip(images, scene.cameras)):
        path = os.path.join(out, f"frame_{args.frame:05d}_view{i}_projected.t3dc")
        T.save_t3dc(path, project_2d_to_3d(img, cam, vox))
        paths.append(path)
    print(json.dumps({"volumes": paths}))
    return EXIT_OK


def cmd_pcm(args) -> int:
    """Per-view PCM of a volume (ground truth or checkpoint prediction) against the view masks."""
    cfg = load_config(args)
    scene = _load_scene(args.scene)
    gts, vox, _ = _load_gt(args.gt)
    by_id = {g.frame_id: g for g in gts}
    if args.frame not in by_id:
        raise InputError(f"frame {args.frame} not in ground truth")
    gt = by_id[args.frame]
    G = gt.volume
    if args.checkpoint:
        params, mcfg, _ = load_checkpoint(args.checkpoint)
        G, _ = forward(render_views(scene, args.frame), params, mcfg)
    th = cfg.thresholds
    values = []
    for i, (cam, m) in enumerate(zip(pooled(scene.cameras), gt.maps)):
        mask = backproject_3d_to_2d_mask(G, cam, vox, th.T)
        values.append(pcm(view_mask(m, th.mask), mask, th.alpha).item())
        if args.out:
            T.save_t3dc(os.path.join(_out_dir(args), f"frame_{args.frame:05d}_view{i}_mask.t3dc"), mask)
    print(json.dumps({"frame_id": args.frame, "pcm": values, "mean": float(np.mean(values))}))
    return EXIT_OK


# ---------------------------------------------------------------- plumbing

def _error(code: int, kind: str, message: str, **extra) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code, **extra}) + "\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with TrainConfig fields (overrides the preset)")
    common.add_argument("--preset", choices=PRESETS)
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mvc3d", description="Multi-view 3D crowd counting toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-scene", parents=[common], help="generate a synthetic multi-camera scene")
    s.add_argument("--out", required=True)
    s.add_argument("--images", action="store_true", help="also dump rendered views as PGM")
    s.set_defaults(func=cmd_gen_scene)

    s = sub.add_parser("make-gt", parents=[common], help="build 3D and per-view ground truth")
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_gt)

    s = sub.add_parser("train", parents=[common], help="train the network")
    s.add_argument("--scene", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--stage", type=int, choices=(1, 2, 3), help="run only this stage")
    s.add_argument("--resume", help="checkpoint to start from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="score a checkpoint")
    s.add_argument("--scene", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--ground-truth-as-prediction", action="store_true")
    s.add_argument("--frames", choices=("test", "all"), default="test")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("project", parents=[common], help="dump 2D->3D projections of a frame's views")
    s.add_argument("--scene", required=True)
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_project)

    s = sub.add_parser("pcm", parents=[common], help="per-view PCM of a frame")
    s.add_argument("--scene", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--checkpoint")
    s.add_argument("--out", help="directory for back-projected masks")
    s.set_defaults(func=cmd_pcm)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (InputError, ConfigError, SceneConfigError, SceneValidationError, FormatError, ShapeError,
            ValueError, KeyError, OSError) as exc:
        _error(EXIT_INPUT, type(exc).__name__, str(exc))
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
