"""Command line entry point: gen-data, train, eval, sweep.

Exit codes: 0 success, 2 config error, 3 data error, 4 diverged run.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .. import data as data_mod
from ..errors import ConfigError, DataError, DivergedRunError
from .config import TrainConfig, load_config
from .sweep import CLI_AXES, SweepSpec, sweep, sweep_csv, write_sweep
from .train import evaluate_checkpoint, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


def _size(text: str):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}") from exc
    return h, w


def _values(text: str):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad value list {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ucelab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic train/val dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--num-train", type=int, default=200)
    g.add_argument("--num-val", type=int, default=50)
    g.add_argument("--size", type=_size, default=(64, 64))
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--pixel-noise", type=float, default=0.1)
    g.add_argument("--label-noise", type=float, default=0.05)
    g.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config", help="key=value file; flags override it")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--loss", choices=("ce", "uce"))
    t.add_argument("--alpha", type=float)
    t.add_argument("--beta", type=int)
    t.add_argument("--dropout", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)

    e = sub.add_parser("eval", help="evaluate a checkpoint and render maps")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "val"), default="val")
    e.add_argument("--eval-beta", type=int, default=10)
    e.add_argument("--render")
    e.add_argument("--dropout", type=float, help="override the ratio stored next to the checkpoint")

    s = sub.add_parser("sweep", help="grid sweep over one axis")
    s.add_argument("--axis", choices=tuple(CLI_AXES), required=True)
    s.add_argument("--values", type=_values, required=True)
    s.add_argument("--seeds", type=int, default=1)
    s.add_argument("--base", required=True, help="base config file (must set data and out)")
    return parser


_TRAIN_FLAGS = {
    "data": "data", "out": "out", "loss": "loss_mode", "alpha": "alpha", "beta": "beta",
    "dropout": "dropout_ratio", "epochs": "epochs", "batch": "batch_size", "lr": "lr_base",
    "seed": "seed",
}


def _cmd_gen_data(args) -> int:
    h, w = args.size
    cfg = data_mod.DatasetConfig(
        height=h, width=w, num_classes=args.classes, pixel_noise_std=args.pixel_noise,
        boundary_label_noise=args.label_noise, seed=args.seed,
    )
    manifest = data_mod.write_dataset(args.out, cfg, args.num_train, args.num_val)
    print(" ".join(f"{k}={v}" for k, v in manifest.items()))
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = {
        field: getattr(args, flag) for flag, field in _TRAIN_FLAGS.items() if getattr(args, flag) is not None
    }
    cfg = cfg.replace(**overrides)
    if not cfg.data or not cfg.out:
        raise ConfigError("train needs --data and --out (or data/out in the config file)")
    ckpt, runlog = train(cfg)
    print(runlog.to_csv(), end="")
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    report = evaluate_checkpoint(
        args.ckpt, args.data, args.split, args.eval_beta, render_dir=args.render, dropout_ratio=args.dropout
    )
    print(report.csv_header())
    print(report.csv_row())
    return EXIT_OK


def _cmd_sweep(args) -> int:
    base = load_config(args.base)
    if not base.data or not base.out:
        raise ConfigError("sweep base config must set data and out")
    spec = SweepSpec(CLI_AXES[args.axis], args.values, args.seeds, base)
    rows = sweep(spec)
    write_sweep(rows, Path(base.out) / f"sweep_{args.axis}.csv")
    print(sweep_csv(rows), end="")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    handler = {
        "gen-data": _cmd_gen_data, "train": _cmd_train, "eval": _cmd_eval, "sweep": _cmd_sweep,
    }[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergedRunError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
