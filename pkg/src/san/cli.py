"""Command line entry point: ``san train|sweep|eval|export-embeddings``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config
from .harness import (
    TrainingDiverged,
    evaluate,
    export_embeddings,
    load_task,
    run_experiment,
    sweep_target_classes,
)
from .model import load_checkpoint
from .optim import VARIANTS

log = logging.getLogger("san")

VARIANT_NOTE = "SAN_selective is the ablation WITHOUT the selective (class/instance weighting) mechanism."


def _int_list(text: str) -> list:
    return [int(t) for t in text.split(",") if t.strip()]


def _str_list(text: str) -> list:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="san", description="Selective adversarial partial-transfer experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="flat key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--variant", choices=VARIANTS, help=VARIANT_NOTE)
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")

    p = sub.add_parser("train", help="train one variant and write metrics, checkpoint and summary")
    common(p)

    p = sub.add_parser("sweep", help="train over target class counts, variants and seeds")
    common(p)
    p.add_argument("--counts", type=_int_list, default=[3, 5, 8, 10])
    p.add_argument("--variants", type=_str_list, default=["SAN", "DANN"])
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("eval", help="score a checkpoint on the configured target data")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("export-embeddings", help="dump bottleneck features of a checkpoint to CSV")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.variant is not None:
        overrides["variant"] = args.variant
    if args.out is not None:
        overrides["output_dir"] = str(args.out)
    cfg = cfg.with_overrides(**overrides)
    cfg.train.__post_init__()
    cfg.validate()
    return cfg


def _checkpoint_task(args, cfg: ExperimentConfig):
    model = load_checkpoint(args.checkpoint)
    task = load_task(cfg)
    if task.source.dim != model.input_dim:
        raise ValueError(f"checkpoint expects {model.input_dim} features, data has {task.source.dim}")
    return model, task


def cmd_train(args, cfg: ExperimentConfig) -> int:
    result = run_experiment(cfg)
    rec = result.final
    print(f"variant={cfg.train.variant} seed={cfg.train.seed} steps={cfg.train.total_steps} "
          f"target_accuracy={rec.target_accuracy:.4f} out={result.output_dir}")
    if cfg.train.variant == "SAN_selective":
        print(f"note: {VARIANT_NOTE}")
    return 0


def cmd_sweep(args, cfg: ExperimentConfig) -> int:
    bad = [v for v in args.variants if v not in VARIANTS]
    if bad:
        raise ValueError(f"unknown variants {bad}; expected a subset of {VARIANTS}")
    res = sweep_target_classes(cfg, args.counts, args.variants, args.seeds, cfg.output_dir, args.jobs)
    print("num_target_classes," + ",".join(args.variants))
    for c in args.counts:
        print(f"{c}," + ",".join(f"{res.mean_accuracy(c, v):.4f}" for v in args.variants))
    failed = [r for r in res.rows if r.status != "ok"]
    for r in failed:
        print(f"cell kt={r.num_target_classes} {r.variant} seed={r.seed}: {r.status}", file=sys.stderr)
    return 1 if failed else 0


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    model, task = _checkpoint_task(args, cfg)
    if task.target_labels is None:
        raise ValueError("target data has no labels to evaluate against")
    acc, per_class = evaluate(model, task.target.features.astype(model.head.w.data.dtype), task.target_labels)
    print(json.dumps({"target_accuracy": acc,
                      "per_class_accuracy": [None if v != v else float(v) for v in per_class]}))
    return 0


def cmd_export(args, cfg: ExperimentConfig) -> int:
    model, task = _checkpoint_task(args, cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = export_embeddings(model, task, out / "embeddings.csv")
    print(path)
    return 0


COMMANDS = {"train": cmd_train, "sweep": cmd_sweep, "eval": cmd_eval, "export-embeddings": cmd_export}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 3
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
