"""Command-line entry points for scene generation, training and evaluation.

Exit codes: 0 success, 1 usage error, 2 runtime failure.  Every command
takes --seed; identical invocations produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import model3d as m3d
from .geometry import InsufficientInliers, Pose
from .pipeline import (Config, EvalReport, InsufficientMatches, appearance_shift_eval,
                       evaluate, finetune, load_checkpoint, localize, pretrain,
                       render_image, save_checkpoint, select_supports)
from .scene import load_scene, save_scene, write_ppm
from .synth import SceneSpec, generate_scene


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        sys.exit(1)


def _load_config(path: str | None, fallback: dict | None = None) -> Config:
    if path:
        return Config.from_file(path)
    if fallback:
        return Config.from_dict(fallback)
    return Config()


def _cmd_generate_scene(args) -> int:
    spec = SceneSpec.from_dict(json.loads(Path(args.spec).read_text())) \
        if args.spec else SceneSpec()
    scene = generate_scene(spec, seed=args.seed, name=args.name)
    save_scene(scene, Path(args.out))
    print(f"wrote scene '{scene.name}' ({len(scene.frames)} frames) to {args.out}")
    return 0


def _cmd_pretrain(args) -> int:
    cfg = _load_config(args.config)
    scenes = [load_scene(Path(d)) for d in args.scenes]
    store, history = pretrain(scenes, cfg, seed=args.seed, log=print)
    save_checkpoint(store, args.out, stage="pretrain", cfg=cfg, seed=args.seed)
    if args.history:
        Path(args.history).write_text(json.dumps(history, indent=1))
    print(f"wrote checkpoint {args.out}")
    return 0


def _cmd_finetune(args) -> int:
    base, manifest = load_checkpoint(args.base)
    cfg = _load_config(args.config, manifest.get("config"))
    scene = load_scene(Path(args.scene))
    store, history = finetune(scene, base, cfg, seed=args.seed, log=print)
    save_checkpoint(store, args.out, stage="finetune", cfg=cfg, seed=args.seed,
                    scene_name=scene.name)
    if args.history:
        Path(args.history).write_text(json.dumps(history, indent=1))
    print(f"wrote checkpoint {args.out}")
    return 0


def _cmd_localize(args) -> int:
    store, manifest = load_checkpoint(args.ckpt)
    cfg = _load_config(args.config, manifest.get("config"))
    scene = load_scene(Path(args.scene))
    from .scene import read_ppm
    image = read_ppm(Path(args.image))
    result = {"schema_version": 1}
    try:
        pose, diag = localize(image, scene, store, cfg, seed=args.seed)
        result.update({
            "pose": [float(x) for x in pose.matrix4().reshape(-1)],
            "match_count": diag["match_count"],
            "inlier_count": diag["inlier_count"],
            "num_points": diag["num_points"],
            "elapsed_s": diag["elapsed_s"],
            "error": None,
        })
    except (InsufficientMatches, InsufficientInliers) as exc:
        result.update({"pose": None, "error": type(exc).__name__,
                       "message": str(exc)})
    Path(args.out).write_text(json.dumps(result, indent=1))
    print(f"wrote {args.out}" + (f" (error: {result['error']})" if result.get("error") else ""))
    return 0


def _cmd_evaluate(args) -> int:
    store, manifest = load_checkpoint(args.ckpt)
    cfg = _load_config(args.config, manifest.get("config"))
    scene = load_scene(Path(args.scene))
    indices = scene.test_indices if args.split == "test" else scene.train_indices
    report = evaluate(scene, indices, store, cfg, seed=args.seed,
                      threads=args.threads)
    Path(args.report).write_text(json.dumps(report.to_dict(), indent=1))
    print(f"accuracy {report.accuracy:.3f}  median {report.median_translation_cm:.1f}cm"
          f"/{report.median_rotation_deg:.2f}deg  IoU {report.matching_iou:.3f}"
          f"  PSNR {report.psnr_db:.1f}dB  failures {report.failures}")
    return 0


def _cmd_render(args) -> int:
    store, manifest = load_checkpoint(args.ckpt)
    cfg = _load_config(args.config, manifest.get("config"))
    scene = load_scene(Path(args.scene))
    pose = Pose.from_matrix4(json.loads(Path(args.pose).read_text()))
    intr = scene.frames[0].intr
    support_idx = select_supports(scene, cfg, store,
                                  query_image=scene.frames[scene.train_indices[0]].image) \
        if cfg.support_policy == "retrieval" else \
        select_supports(scene, cfg, store)
    supports = [scene.frames[i] for i in support_idx]
    prior_on = cfg.use_coord_prior and bool(store.meta.get("prior_registered"))
    model = m3d.assemble_model(store, supports, scene.bounds, adapt=False,
                               k_neighbors=cfg.knn_k, lift_stride=cfg.lift_stride,
                               prior_enabled=prior_on)
    image = render_image(store, model, pose, intr, cfg)
    write_ppm(Path(args.out), image)
    print(f"wrote {args.out}")
    return 0


def _cmd_ablate_appearance(args) -> int:
    store, manifest = load_checkpoint(args.ckpt)
    cfg = _load_config(args.config, manifest.get("config"))
    scene = load_scene(Path(args.scene))
    shift = json.loads(Path(args.shift).read_text())
    reports = appearance_shift_eval(scene, store, shift, cfg, seed=args.seed,
                                    threads=args.threads)
    payload = {name: rep.to_dict() for name, rep in reports.items()}
    Path(args.report).write_text(json.dumps(payload, indent=1))
    for name, rep in reports.items():
        print(f"{name}: accuracy {rep.accuracy:.3f}  IoU {rep.matching_iou:.3f}"
              f"  PSNR {rep.psnr_db:.1f}dB")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="matchloc",
                     description="Visual re-localization against a "
                                 "support-conditioned neural scene model")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-scene", help="ray-cast a synthetic RGB-D scene")
    p.add_argument("--spec", help="JSON scene spec (defaults when omitted)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--name", default=None)
    p.set_defaults(fn=_cmd_generate_scene)

    p = sub.add_parser("pretrain", help="multi-scene training from scratch")
    p.add_argument("--scenes", nargs="+", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--history", default=None, help="optional loss-curve JSON")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_pretrain)

    p = sub.add_parser("finetune", help="per-scene optimization of a checkpoint")
    p.add_argument("--scene", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--history", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_finetune)

    p = sub.add_parser("localize", help="estimate the pose of one query image")
    p.add_argument("--scene", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_localize)

    p = sub.add_parser("evaluate", help="localization metrics over a split")
    p.add_argument("--scene", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--report", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("render", help="volume-render a novel view")
    p.add_argument("--scene", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pose", required=True, help="JSON with 16 camera-to-world floats")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_render)

    p = sub.add_parser("ablate-appearance",
                       help="shifted-style evaluation with adaptation on/off")
    p.add_argument("--scene", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--shift", required=True, help="JSON {gain: [3], bias: [3]}")
    p.add_argument("--report", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_ablate_appearance)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # runtime failure contract
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
