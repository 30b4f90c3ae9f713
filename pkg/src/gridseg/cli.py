"""Command line interface.

Subcommands: ``report`` (model layout and cost summary), ``train``,
``eval``, ``infer`` (single image to label map), and ``gradcheck``
(finite-difference audit of the backward pass). Exit codes: 0 on
success, 1 for usage or configuration problems, 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .data import (
    generate_dataset,
    load_image,
    render_class_map,
    write_pgm,
    write_ppm,
)
from .gradcheck import finite_diff_gradcheck
from .grid import GridSpec, build_grid, grid_report, symmetric_columns
from .metrics import evaluate_scenes, multiscale_predict
from .ops import softmax_cross_entropy
from .optim import GradientError
from .tensor import Tape
from .train import load_checkpoint, make_optimizer, save_checkpoint, train_run


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); we map usage to 1
        raise UsageError(message)


def _build_parser() -> _Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")

    p = _Parser(prog="gridseg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("report", parents=[common],
                        help="print the model layout and cost summary")
    sp.add_argument("--input-size", type=int, default=None,
                    help="square input side (default: augment out_size)")

    sp = sub.add_parser("train", parents=[common], help="train on synthetic scenes")
    sp.add_argument("--checkpoint", default="model.grdn", help="output checkpoint")
    sp.add_argument("--log", default=None, help="JSONL training log path")
    sp.add_argument("--resume", default=None, help="checkpoint to continue from")
    sp.add_argument("--epochs", type=int, default=None,
                    help="override the configured epoch count")

    sp = sub.add_parser("eval", parents=[common],
                        help="evaluate a checkpoint on held-out scenes")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--threads", type=int, default=1,
                    help="parallel per-image evaluation threads")

    sp = sub.add_parser("infer", parents=[common], help="segment one PPM image")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True, help="input PPM")
    sp.add_argument("--out", required=True, help="output label map (PGM)")
    sp.add_argument("--color", default=None, help="optional color render (PPM)")

    sp = sub.add_parser("gradcheck", parents=[common],
                        help="finite-difference gradient audit")
    sp.add_argument("--coords", type=int, default=80,
                    help="parameter coordinates to probe")
    sp.add_argument("--tol", type=float, default=1e-4,
                    help="maximum relative error accepted")
    return p


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise UsageError(f"--seed must be non-negative, got {args.seed}")
        cfg = RunConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    return cfg


def _print(doc: dict) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False))


def _train_scenes(cfg: RunConfig, seed: int):
    return generate_dataset(cfg.data.n_train, seed=seed, width=cfg.data.width,
                            height=cfg.data.height,
                            num_classes=cfg.grid.num_classes,
                            max_shapes=cfg.data.max_shapes)


def _eval_scenes(cfg: RunConfig, seed: int):
    return generate_dataset(cfg.data.n_eval, seed=seed + cfg.data.n_train,
                            width=cfg.data.width, height=cfg.data.height,
                            num_classes=cfg.grid.num_classes,
                            max_shapes=cfg.data.max_shapes)


def _cmd_report(args) -> int:
    cfg = _load_run_config(args)
    side = args.input_size or cfg.augment.out_size
    model = build_grid(cfg.grid, (side, side), seed=cfg.seed)
    _print(grid_report(model))
    return 0


def _cmd_train(args) -> int:
    cfg = _load_run_config(args)
    if args.epochs is not None:
        if args.epochs < 0:
            raise UsageError(f"--epochs must be non-negative, got {args.epochs}")
        cfg = RunConfig.from_dict(
            {**cfg.to_dict(), "train": {**cfg.train.to_dict(), "epochs": args.epochs}})
    if args.resume:
        model, optim, info = load_checkpoint(args.resume, expect_spec=cfg.grid)
        seed, epochs_done = info["seed"], info["epochs_done"]
    else:
        side = cfg.augment.out_size
        model = build_grid(cfg.grid, (side, side), seed=cfg.seed)
        optim = make_optimizer(model, cfg.train)
        seed, epochs_done = cfg.seed, 0
    scenes = _train_scenes(cfg, seed)
    records = train_run(model, scenes, cfg.augment, cfg.train, seed=seed,
                        optim=optim, epochs_done=epochs_done, log_path=args.log,
                        snapshot_path=args.checkpoint)
    save_checkpoint(args.checkpoint, model, optim, train_seed=seed,
                    epochs_done=cfg.train.epochs)
    _print({
        "checkpoint": args.checkpoint,
        "epochs_done": cfg.train.epochs,
        "epochs_run": len(records),
        "final_loss": records[-1]["loss"] if records else None,
    })
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    expect = cfg.grid if args.config else None
    model, _, info = load_checkpoint(args.checkpoint, expect_spec=expect)
    scenes = _eval_scenes(cfg, info["seed"])
    report = evaluate_scenes(model, scenes, scales=cfg.eval.scales,
                             categories=cfg.eval.categories,
                             ignore_label=cfg.train.ignore_label,
                             threads=args.threads)
    _print(report)
    return 0


def _cmd_infer(args) -> int:
    cfg = _load_run_config(args)
    expect = cfg.grid if args.config else None
    model, _, _ = load_checkpoint(args.checkpoint, expect_spec=expect)
    image = load_image(args.image)
    pred = multiscale_predict(model, image, scales=cfg.eval.scales)
    write_pgm(args.out, pred)
    if args.color:
        write_ppm(args.color, render_class_map(pred, model.spec.num_classes))
    _print({"image": args.image, "out": args.out,
            "classes_found": sorted(int(c) for c in np.unique(pred))})
    return 0


def _cmd_gradcheck(args) -> int:
    # small float64 twin of the real architecture: 3 streams, 1 sub + 1 up
    spec = GridSpec(3, symmetric_columns(1, 1), base_channels=4, num_classes=3)
    model = build_grid(spec, (8, 8), seed=0, dtype=np.float64)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 3, 8, 8))
    labels = rng.integers(0, 3, size=(1, 8, 8))

    def loss_fn(tape: Tape):
        logits = model.forward(x, training=True, tape=tape)
        return softmax_cross_entropy(logits, labels, tape=tape)

    report = finite_diff_gradcheck(loss_fn, model.named_parameters(),
                                   n_coords=args.coords, seed=1)
    doc = report.to_dict()
    doc["tolerance"] = args.tol
    doc["passed"] = report.max_rel_error < args.tol
    _print(doc)
    return 0 if doc["passed"] else 2


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {
            "report": _cmd_report,
            "train": _cmd_train,
            "eval": _cmd_eval,
            "infer": _cmd_infer,
            "gradcheck": _cmd_gradcheck,
        }[args.command]
        return handler(args)
    except (UsageError, ConfigError) as e:
        print(f"gridseg: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError, GradientError) as e:
        print(f"gridseg: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
