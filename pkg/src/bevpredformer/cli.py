"""Command line entry point: gen-data, train, evaluate, infer, ablate."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checkpoint as ckpt
from .dataset import read_dataset, write_dataset
from .synth import GenConfig, generate_dataset
from .train import (TrainConfig, evaluate, format_ablation, load_checkpoint, predict, run_ablation, save_checkpoint,
                    train_stage1, train_stage2)
from .viz import write_pgm, write_png

# TrainConfig fields whose default is None need an explicit parser
_OPTIONAL_TYPES = {"max_steps": int, "train_data": str, "val_data": str, "stage1_ckpt": str, "out": str}


def add_config_flags(p: argparse.ArgumentParser) -> None:
    """One ``--flag`` per TrainConfig field; unset flags leave the config file value alone."""
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    defaults = TrainConfig()
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        value = getattr(defaults, f.name)
        if f.name == "grid":
            p.add_argument(flag, dest=f.name, type=json.loads, default=None, help="grid as a JSON object")
        elif isinstance(value, bool):
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        elif isinstance(value, tuple):
            p.add_argument(flag, dest=f.name, type=float, nargs=len(value), default=None)
        elif f.name in _OPTIONAL_TYPES:
            p.add_argument(flag, dest=f.name, type=_OPTIONAL_TYPES[f.name], default=None)
        elif f.name == "stage":
            p.add_argument(flag, dest=f.name, type=int, choices=(1, 2), default=None)
        else:
            p.add_argument(flag, dest=f.name, type=type(value), default=None)


def config_from_args(args: argparse.Namespace, **forced) -> TrainConfig:
    base = json.loads(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    for f in fields(TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            base[f.name] = v
    base.update(forced)
    return TrainConfig.from_dict(base)


# ----------------------------------------------------------------- reports

def format_report(m: dict, title: str = "evaluation") -> str:
    lines = [f"{title} ({m.get('n_samples', 0)} samples)", f"{'metric':<10}{'value':>10}"]
    for key in ("iou", "vpq", "present_iou"):
        if key in m:
            lines.append(f"{key.upper() if key != 'present_iou' else 'IoU(t=0)':<10}{m[key] * 100:>10.2f}")
    if "iou_per_frame" in m:
        lines.append(f"{'t':>4}{'IoU':>10}{'VPQ':>10}")
        for t, (a, b) in enumerate(zip(m["iou_per_frame"], m["vpq_per_frame"])):
            lines.append(f"{t:>4}{a * 100:>10.2f}{b * 100:>10.2f}")
    return "\n".join(lines)


def emit_report(m: dict, prefix: Optional[str], title: str) -> None:
    text = format_report(m, title)
    print(text)
    if prefix:
        Path(prefix + ".json").write_text(json.dumps(m, indent=2), encoding="utf-8")
        Path(prefix + ".txt").write_text(text + "\n", encoding="utf-8")


# ----------------------------------------------------------------- verbs

def cmd_gen_data(args) -> int:
    gen = GenConfig.from_dict(json.loads(Path(args.gen_config).read_text(encoding="utf-8"))) \
        if args.gen_config else GenConfig()
    write_dataset(args.out, generate_dataset(args.n, args.seed, gen))
    print(f"wrote {args.n} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = config_from_args(args).validate(need_paths=True)
    if not cfg.out:
        raise ValueError("--out checkpoint path required")
    samples = read_dataset(cfg.train_data)
    res = train_stage1(cfg, samples) if cfg.stage == 1 else train_stage2(cfg, samples)
    save_checkpoint(res.net, cfg.out, cfg, stage=cfg.stage, metrics=res.metrics)
    Path(cfg.out + ".losses.json").write_text(json.dumps({"loss": res.losses, "lr": res.lrs}), encoding="utf-8")
    emit_report(res.metrics, cfg.out + ".train", f"stage {cfg.stage} training set")
    if cfg.stage == 2 and cfg.val_data:
        emit_report(evaluate(res.net, read_dataset(cfg.val_data)), cfg.out + ".val", "validation")
    return 0


def cmd_evaluate(args) -> int:
    net, _ = load_checkpoint(args.ckpt)
    emit_report(evaluate(net, read_dataset(args.data)), args.report, "evaluation")
    return 0


def cmd_infer(args) -> int:
    net, _ = load_checkpoint(args.ckpt)
    samples = read_dataset(args.data)
    indices = args.index if args.index else range(len(samples))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in indices:
        p = predict(net, samples[i])
        stem = f"sample{i:04d}"
        ckpt.save(out / f"{stem}.bpft", {"seg_logits": p.seg_logits, "flow": p.flow,
                                         "instances": p.instances.astype(np.float32)})
        for k, labels in enumerate(p.instances):
            name = f"{stem}_t{k - 1:+d}"
            write_pgm(out / f"{name}.pgm", labels)
            write_png(out / f"{name}.png", labels, args.scale)
    print(f"wrote predictions for {len(indices)} samples to {out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = config_from_args(args)
    if not cfg.train_data or not cfg.val_data:
        raise ValueError("ablation needs --train-data and --val-data")
    rows = run_ablation(cfg, read_dataset(cfg.train_data), read_dataset(cfg.val_data),
                        patterns=tuple(args.patterns), blocks=tuple(args.blocks), seeds=tuple(args.seeds))
    table = format_ablation(rows)
    print(table)
    if args.report:
        Path(args.report + ".json").write_text(json.dumps(rows, indent=2), encoding="utf-8")
        Path(args.report + ".txt").write_text(table + "\n", encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bevpredformer", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gen-config", help="JSON file with generator settings")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="IoU and VPQ of a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", help="prefix for .json and .txt reports")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("infer", help="write instance maps as PGM, PNG and raw tensors")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--index", type=int, nargs="*")
    p.add_argument("--scale", type=int, default=8, help="PNG pixels per cell")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="pattern x n_blocks grid of stage-2 runs")
    add_config_flags(p)
    p.add_argument("--patterns", nargs="+", default=["TS", "TST", "TSST"])
    p.add_argument("--blocks", type=int, nargs="+", default=[1, 2])
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--report", help="prefix for .json and .txt reports")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
