"""Command-line interface: dataset synthesis, view configs, mirrored poses,
training, evaluation, and rendering.

Exit codes: 0 success, 1 bad usage, 2 data problems, 3 numeric failure
during optimization.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .dataio import (SCENES, config_indices, generate_synthetic_dataset,
                     load_nerf_synthetic, make_configs, save_image_png,
                     save_variance_png)
from .errors import (DataError, FlipFieldError, GeometryError, MissingFile,
                     NumericFailure, UsageError)
from .field import load_checkpoint
from .geometry import Plane, Pose, estimate_flipped_poses
from .metrics import evaluate, render_settings_from_manifest
from .renderer import CameraIntrinsics, render_image
from .trainer import MODES, TrainConfig, run_schedule

_PLANES = {"x=0": (1.0, 0.0, 0.0),
           "y=0": (0.0, 1.0, 0.0),
           "z=0": (0.0, 0.0, 1.0)}
PLANE_CHOICES = ("auto",) + tuple(sorted(_PLANES))


def parse_plane(text: str) -> Plane | None:
    """'auto' defers to the fitted symmetry plane; 'x=0'/'y=0'/'z=0' pin one
    through the origin."""
    if text == "auto":
        return None
    if text not in _PLANES:
        raise UsageError(
            f"unknown plane {text!r}; expected one of {', '.join(PLANE_CHOICES)}")
    return Plane(np.array(_PLANES[text]), 0.0)


def _load_manifest(run_dir: Path) -> dict:
    path = run_dir / "manifest.json"
    if not path.exists():
        raise MissingFile(f"no manifest.json under {run_dir}")
    return json.loads(path.read_text())


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> None:
    scene = SCENES[args.scene]()
    dataset = generate_synthetic_dataset(scene, args.out, image_size=args.size)
    counts = {name: len(obs) for name, obs in dataset.splits.items()}
    summary = ", ".join(f"{name}: {n}" for name, n in sorted(counts.items()))
    print(f"wrote {args.scene} dataset to {args.out} ({summary})")


def cmd_make_configs(args) -> None:
    dataset = load_nerf_synthetic(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for cfg in make_configs(dataset):
        (out / f"config_{cfg.n}.json").write_text(
            json.dumps(list(cfg.indices)) + "\n")
    print(f"wrote 8 view configurations to {out}")


def cmd_flip_poses(args) -> None:
    dataset = load_nerf_synthetic(args.data)
    train = dataset.split("train")
    indices = config_indices(args.config_n)
    if len(train) < max(indices):
        raise DataError(f"train split has {len(train)} views; "
                        f"configuration {args.config_n} needs view {max(indices)}")
    views = [train[i - 1] for i in indices]
    flipped = estimate_flipped_poses([v.pose for v in views],
                                     plane=parse_plane(args.plane))
    intr = views[0].intr
    angle_x = float(2.0 * np.arctan2(0.5 * intr.width, intr.focal))
    payload = {
        "camera_angle_x": angle_x,
        "frames": [{"file_path": f"./flipped/r_{i - 1}",
                    "transform_matrix": p.matrix().tolist()}
                   for i, p in zip(indices, flipped)],
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, indent=2))
    print(f"wrote {len(indices)} mirrored poses to {out}")


def cmd_train(args) -> None:
    dataset = load_nerf_synthetic(args.data)
    config = TrainConfig(mode=args.mode.replace("-", "_"),
                         total_iters=args.iters, warmup_iters=args.warmup,
                         rays_per_batch=args.rays,
                         resolution=(args.grid,) * 3,
                         beta_min_sq=args.beta_min_sq, reg_weight=args.reg_w,
                         seed=args.seed)
    _, manifest = run_schedule(dataset, args.config_n, config,
                               out_dir=args.out, plane=parse_plane(args.plane),
                               verbose=True)
    print(f"finished {config.total_iters} iterations; "
          f"final loss {manifest['loss']['total']:.5f}; run saved to {args.out}")


def cmd_eval(args) -> None:
    dataset = load_nerf_synthetic(args.data)
    report = evaluate(args.run, dataset, args.split, out_csv=args.out)
    print(f"{args.split}: {len(report.view_ids)} views  "
          f"mean PSNR {report.mean_psnr_db:.3f} dB  "
          f"mean SSIM {report.mean_ssim:.4f}")


def cmd_render(args) -> None:
    run = Path(args.run)
    manifest = _load_manifest(run)
    roster = manifest["observations"]
    if not 0 <= args.pose_index < len(roster):
        raise UsageError(f"pose index {args.pose_index} out of range "
                         f"[0, {len(roster) - 1}]")
    entry = roster[args.pose_index]
    mat = np.asarray(entry["final_pose"], dtype=float)
    pose = Pose(mat[:3, :3], mat[:3, 3])
    ic = entry["intrinsics"]
    intr = CameraIntrinsics(ic["width"], ic["height"], ic["focal"],
                            ic["cx"], ic["cy"])
    params = load_checkpoint(run / manifest.get("checkpoint", "field.ckpt"))
    rgb, variance = render_image(params, pose, intr,
                                 render_settings_from_manifest(manifest))
    save_image_png(args.out, rgb)
    record = {"pose_index": args.pose_index, "image": str(args.out)}
    if args.variance is not None:
        vmin, vmax = save_variance_png(args.variance, variance)
        record.update({"variance_image": str(args.variance),
                       "variance_min": vmin, "variance_max": vmax})
    manifest.setdefault("renders", []).append(record)
    (run / "manifest.json").write_text(json.dumps(manifest, indent=2))
    extra = f" and variance map {args.variance}" if args.variance else ""
    print(f"rendered pose {args.pose_index} to {args.out}{extra}")


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flipfield",
        description="Voxel radiance fields with mirrored-view augmentation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic ring dataset")
    p.add_argument("--scene", required=True, choices=sorted(SCENES))
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--size", type=int, default=64, help="square image side")
    p.add_argument("--seed", type=int, default=0,
                   help="reserved; generation is deterministic")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("make-configs",
                       help="write the eight 8-view ring configurations")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_make_configs)

    p = sub.add_parser("flip-poses",
                       help="estimate poses for horizontally mirrored images")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config-n", type=int, required=True,
                   choices=range(1, 9), metavar="{1..8}")
    p.add_argument("--plane", default="auto", choices=PLANE_CHOICES)
    p.add_argument("--out", required=True, help="output transforms file")
    p.set_defaults(func=cmd_flip_poses)

    p = sub.add_parser("train", help="fit a field on one view configuration")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config-n", type=int, required=True,
                   choices=range(1, 9), metavar="{1..8}")
    p.add_argument("--mode", required=True,
                   choices=[m.replace("_", "-") for m in MODES])
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--iters", type=int, default=2500)
    p.add_argument("--warmup", type=int, default=500,
                   help="iterations before the uncertainty term activates")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", type=int, default=64, help="voxels per axis")
    p.add_argument("--rays", type=int, default=1024, help="rays per batch")
    p.add_argument("--beta-min-sq", type=float, default=0.05,
                   help="variance floor")
    p.add_argument("--reg-w", type=float, default=0.01,
                   help="density regularizer weight")
    p.add_argument("--plane", default="auto", choices=PLANE_CHOICES)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a run's checkpoint on a split")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="test",
                   choices=("test", "train", "upper"))
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render one roster pose from a run")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--pose-index", type=int, required=True,
                   help="index into the run's observation roster")
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--variance", default=None,
                   help="also write a normalized variance PNG here")
    p.set_defaults(func=cmd_render)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad usage; we report 1
        return 0 if exc.code in (0, None) else 1
    try:
        args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericFailure as exc:
        where = f" at iteration {exc.iteration}" if exc.iteration is not None else ""
        print(f"numeric failure{where}: {exc}", file=sys.stderr)
        return 3
    except (DataError, GeometryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2
    except FlipFieldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
