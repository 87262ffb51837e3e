"""Command-line entry point: ``rectnerf {make-synthetic,train,render,eval}``.

Exit codes: 0 success, 2 configuration error, 3 data or checkpoint error,
4 non-finite loss during training.  ``RECTNERF_LOG_LEVEL`` sets the log
verbosity (default ``WARNING``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .archive import atomic_write_bytes
from .data import SyntheticLayout, difficulty_sources, load_dataset, load_scene, make_synthetic_dataset
from .errors import CheckpointError, ConfigError, DomainError, NumericalError, SceneLoadError, SplitError
from .evaluation import evaluate, format_summary, scene_rows, write_report
from .files import write_depth_grid, write_png
from .renderer import render_image
from .training import TrainConfig, Trainer, format_config, load_config, load_model

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

log = logging.getLogger("rectnerf")


def _make_synthetic(args):
    layout = SyntheticLayout(rig=args.rig, num_views=args.views, width=args.size, height=args.size,
                             focal=float(args.size))
    paths = make_synthetic_dataset(args.out, scenes=args.scenes, seed=args.seed, layout=layout)
    for p in paths:
        print(p)


def _train(args):
    config = load_config(args.config) if args.config else TrainConfig()
    if args.steps is not None:
        config = TrainConfig.from_dict({**config.to_dict(), "steps": args.steps})
    scenes = load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    checkpoint = os.path.join(args.out, "checkpoint.zip")
    if args.resume:
        trainer = Trainer.resume(args.resume, scenes, config if args.config or args.steps is not None else None)
    else:
        trainer = Trainer(config, scenes)
    atomic_write_bytes(os.path.join(args.out, "config.txt"), format_config(trainer.config).encode())
    try:
        trainer.run(log_path=os.path.join(args.out, "train.log"), checkpoint_path=checkpoint)
    except NumericalError as exc:
        dump = json.dumps(exc.diagnostics, indent=2, sort_keys=True)
        atomic_write_bytes(os.path.join(args.out, "diagnostics.json"), dump.encode())
        raise
    if trainer.history:
        print(f"step {trainer.step_count} loss {trainer.history[-1].loss:.6f}")
    print(checkpoint)


def _render(args):
    model, config = load_model(args.checkpoint)
    scene = load_scene(args.scene)
    if not 0 <= args.target_view < len(scene):
        raise SplitError(f"target view {args.target_view} is outside 0..{len(scene) - 1}")
    sources = difficulty_sources(scene, args.target_view, args.split, config.num_sources)
    view = scene.views[args.target_view]
    out = render_image(model, [scene.views[i] for i in sources], view.intrinsics, view.pose, view.near, view.far,
                       chunk_size=args.chunk)
    h, w = scene.valid_size
    write_png(os.path.join(args.out, "image.png"), out.image[:h, :w])
    write_depth_grid(os.path.join(args.out, "depth.bin"), out.depth[:h, :w])
    write_depth_grid(os.path.join(args.out, "opacity.bin"), out.opacity[:h, :w])
    print(os.path.join(args.out, "image.png"))


def _eval(args):
    model, config = load_model(args.checkpoint)
    scenes = load_dataset(args.data)
    targets = args.targets or list(config.holdout_views)
    results = evaluate(model, scenes, args.split, targets, chunk_size=args.chunk)
    rows = scene_rows(results, args.split)
    write_report(args.out, rows, args.split)
    print(format_summary(rows, args.split), end="")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rectnerf", description="Sparse-view radiance fields with feature rectification.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", help="write a synthetic multi-view dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rig", choices=("ring", "line"), default="line")
    p.add_argument("--views", type=int, default=16)
    p.add_argument("--size", type=int, default=64, help="image width and height in pixels")
    p.set_defaults(func=_make_synthetic)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--data", required=True, help="scene directory or a directory of scenes")
    p.add_argument("--out", required=True, help="output directory for checkpoint, log and config")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--steps", type=int, help="override the configured total step count")
    p.set_defaults(func=_train)

    p = sub.add_parser("render", help="render one target view of a scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--target-view", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--chunk", type=int, default=1024)
    p.add_argument("--split", choices=("small", "medium", "large"), default="small")
    p.set_defaults(func=_render)

    p = sub.add_parser("eval", help="evaluate held-out views and write the metrics report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("small", "medium", "large"), default="small")
    p.add_argument("--out", required=True)
    p.add_argument("--targets", type=int, nargs="*", help="target view ids (default: the run's held-out views)")
    p.add_argument("--chunk", type=int, default=1024)
    p.set_defaults(func=_eval)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("RECTNERF_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SceneLoadError, SplitError, CheckpointError, DomainError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
