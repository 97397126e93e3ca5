"""Command-line interface: gen-data, train, eval, render, annotate."""
from __future__ import annotations

import argparse
import logging
import sys
from contextlib import nullcontext
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from ._validation import ConfigError, SplatAvatarError, UsageError
from .annotator import BACKGROUND, annotate_frame
from .data import PART_COLORS, Dataset, MotionSpec, default_cameras, generate_dataset
from .formats import atomic_write_bytes, write_labels, write_ppm
from .model import ABLATIONS
from .render import Camera
from .template import BodyConfig, Pose, build_template
from .train import TrainConfig, apply_overrides, evaluate, load_model, read_config_file, render_novel, train

log = logging.getLogger("splatavatar")


@dataclass
class GenConfig:
    frames: int = 45
    cameras: int = 3
    width: int = 128
    height: int = 128
    seed: int = 0
    distance: float = 3.3
    fov: float = 40.0
    test_cameras: tuple = (2,)
    dense_points: int = 240_000
    supersample: int = 3
    amplitude: float = 1.0
    cycles: float = 1.5
    yaw_turns: float = 1.0
    bulge: float = 0.012
    template_seed: int = 0

    def __post_init__(self):
        for k in ("frames", "cameras", "width", "height", "dense_points", "supersample"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be at least 1")
        self.test_cameras = tuple(int(c) for c in self.test_cameras)


def _configure(args, base):
    cfg = base
    if args.config:
        cfg = read_config_file(args.config, cfg)
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _configure(args, GenConfig())
    motion = MotionSpec(amplitude=cfg.amplitude, cycles=cfg.cycles, yaw_turns=cfg.yaw_turns, bulge=cfg.bulge)
    cams = default_cameras(cfg.cameras, cfg.width, cfg.height, cfg.distance, cfg.fov)
    body = build_template(BodyConfig(), seed=cfg.template_seed)
    ds = generate_dataset(body, motion, cams, cfg.frames, cfg.seed, out_dir=args.out,
                          test_cameras=cfg.test_cameras, dense_points=cfg.dense_points, supersample=cfg.supersample)
    print(f"wrote {len(ds.frames)} frames to {args.out}")
    return 0


def _train_config(args) -> TrainConfig:
    cfg = _configure(args, TrainConfig())
    pairs = []
    if args.ablate:
        pairs.append("ablations=" + ",".join(sorted(set(cfg.ablations) | set(args.ablate))))
    if args.deterministic:
        pairs.append("deterministic=true")
    return apply_overrides(cfg, pairs) if pairs else cfg


def cmd_train(args) -> int:
    cfg = _train_config(args)
    ds = Dataset.load(args.data)

    def progress(step, report, n_points, elapsed):
        log.info("iter %d loss %.6f points %d elapsed %.1fs", step, report.total, n_points, elapsed)

    result = train(ds, cfg, out_dir=args.out, progress=progress)
    print(f"trained {cfg.iterations} iterations in {result.seconds:.1f}s; "
          f"{len(result.model.cloud)} points; checkpoint {Path(args.out) / 'model.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    model, _, _, _ = load_model(args.checkpoint)
    ds = Dataset.load(args.data)
    metrics = evaluate(model, ds.split(args.split))
    text = metrics.csv()
    if args.out:
        atomic_write_bytes(args.out, text.encode())
    sys.stdout.write(text)
    return 0


def colorize_labels(labels):
    colors = np.concatenate([PART_COLORS, np.zeros((1, 3))])
    idx = np.where(labels == BACKGROUND, len(PART_COLORS), labels)
    return colors[idx]


def write_render(out_dir: Path, name: str, images: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_ppm(out_dir / f"{name}_rgb.ppm", images["rgb"])
    write_ppm(out_dir / f"{name}_alpha.ppm", np.repeat(images["alpha"][..., None], 3, axis=-1))
    write_labels(out_dir / f"{name}_labels.lbl", images["labels"])
    write_ppm(out_dir / f"{name}_labels.ppm", colorize_labels(images["labels"]))


def cmd_render(args) -> int:
    model, _, _, _ = load_model(args.checkpoint)
    out = Path(args.out)
    if args.data:
        ds = Dataset.load(args.data)
        frames = ds.split(args.split)
        if args.frame:
            wanted = set(args.frame)
            frames = [f for f in frames if f.frame_id in wanted]
            missing = wanted - {f.frame_id for f in frames}
            if missing:
                raise UsageError(f"no frame {sorted(missing)[0]!r} in split {args.split!r}")
        for f in frames:
            write_render(out, f.frame_id, render_novel(model, f.pose, f.camera))
        print(f"rendered {len(frames)} frames to {out}")
        return 0
    if args.pose:
        _, pose = Pose.from_text(Path(args.pose).read_text())
    else:
        pose = Pose.rest(model.body.n_bones)
    az = np.deg2rad(args.azimuth)
    target = np.array([0.0, 0.95, 0.0])
    eye = target + args.distance * np.array([np.sin(az), 0.0, np.cos(az)])
    eye[1] += args.elevation
    cam = Camera.look_at(eye, target, np.array([0.0, 1.0, 0.0]), args.fov, args.width, args.height)
    write_render(out, args.name, render_novel(model, pose, cam))
    print(f"rendered {args.name} to {out}")
    return 0


def cmd_annotate(args) -> int:
    ds = Dataset.load(args.data)
    frames = ds.split(args.split)
    rows = ["frame_id,foreground,agreement"]
    for f in frames:
        labels = annotate_frame(f, ds.body, ds.label_cache, args.k)
        fg = f.mask > 0
        agree = ""
        if f.parts is not None and fg.any():
            agree = repr(float(np.mean(labels[fg] == f.parts[fg])))
        rows.append(f"{f.frame_id},{int(fg.sum())},{agree}")
    text = "\n".join(rows) + "\n"
    if args.out:
        atomic_write_bytes(args.out, text.encode())
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file applied before --set")
    common.add_argument("--set", action="append", default=[], metavar="K=V", help="override one config key")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible reductions")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="splatavatar", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="render a synthetic multi-view sequence")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="fit an avatar to a sequence")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--ablate", action="append", default=[], choices=ABLATIONS)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="metrics of a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", parents=[common], help="render a checkpoint under a pose and camera")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--data", help="render frames of this sequence")
    r.add_argument("--split", default="test")
    r.add_argument("--frame", action="append", default=[])
    r.add_argument("--pose", help="pose text file; rest pose if omitted")
    r.add_argument("--name", default="novel")
    r.add_argument("--azimuth", type=float, default=45.0)
    r.add_argument("--elevation", type=float, default=0.0)
    r.add_argument("--distance", type=float, default=3.3)
    r.add_argument("--fov", type=float, default=40.0)
    r.add_argument("--width", type=int, default=128)
    r.add_argument("--height", type=int, default=128)
    r.set_defaults(func=cmd_render)

    a = sub.add_parser("annotate", parents=[common], help="transfer template part labels onto frame masks")
    a.add_argument("--data", required=True)
    a.add_argument("--split", default="all")
    a.add_argument("--k", type=int, default=5)
    a.add_argument("--out")
    a.set_defaults(func=cmd_annotate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.command not in ("gen-data", "train") and (args.config or args.set):
        print(f"error: {args.command} takes no configuration keys", file=sys.stderr)
        return 2
    limit = threadpool_limits(1) if args.deterministic else nullcontext()
    try:
        with limit:
            return args.func(args)
    except (SplatAvatarError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
