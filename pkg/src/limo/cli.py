"""Command-line entry point: ``limo run|sweep|dump-synthetic|import-check``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Rng
from .errors import LimoError
from .harness import SWEEPABLE, TOGGLES, RunConfig, run_benchmark, sweep, sweep_csv
from .model import STRATEGIES, build_model
from .tasks import generate_task, import_embeddings, write_container

# flag dest -> RunConfig field
FLAG_FIELDS = {
    "shots": "shots", "classes": "classes", "query_per_class": "query_per_class",
    "strategy": "strategy", "lambda_ent": "lambda_ent", "lambda_cond": "lambda_cond",
    "lambda_text": "lambda_text", "tau": "tau", "rank": "rank", "dropout": "dropout",
    "iterations": "iterations", "lr": "learning_rate", "seeds": "seeds",
    "toggle_off": "toggle_off", "embeddings": "embeddings", "concentration": "concentration",
    "class_correlation": "class_correlation", "kl_reduction": "kl_reduction",
    "freeze_text": "freeze_text",
}


def _int_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    # every default is None so that only flags given explicitly override the config
    p.add_argument("--config", type=Path, help="JSON file with RunConfig keys")
    p.add_argument("--shots", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--query-per-class", type=int)
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--lambda-ent", type=float)
    p.add_argument("--lambda-cond", type=float)
    p.add_argument("--lambda-text", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--rank", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seeds", type=_int_list, help="e.g. 0,1,2")
    p.add_argument("--toggle-off", action="append", choices=TOGGLES,
                   help="drop a loss term; repeatable")
    p.add_argument("--embeddings", help="precomputed embedding container")
    p.add_argument("--concentration", type=float)
    p.add_argument("--class-correlation", type=float)
    p.add_argument("--kl-reduction", choices=("mean", "sum"))
    p.add_argument("--freeze-text", action="store_true", default=None)
    p.add_argument("--out", type=Path, help="output directory")


def config_from_args(args: argparse.Namespace) -> RunConfig:
    data = {}
    if args.config is not None:
        data = json.loads(args.config.read_text())
    for dest, key in FLAG_FIELDS.items():
        value = getattr(args, dest, None)
        if value is not None:
            data[key] = value
    cfg = RunConfig.from_dict(data)
    cfg.validate()
    return cfg


def cmd_run(args) -> int:
    cfg = config_from_args(args)
    result = run_benchmark(cfg, args.out)
    print(f"run {cfg.run_id()} strategy={cfg.strategy} shots={cfg.shots} "
          f"mean_acc={result.mean_acc:.4f} std_acc={result.std_acc:.4f}")
    for seed, zs, acc in zip(result.seeds, result.zero_shot_accuracies, result.accuracies):
        print(f"  seed {seed}: zero-shot {zs:.4f} -> {acc:.4f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = config_from_args(args)
    rows = sweep(cfg, args.parameter, args.values, args.out)
    sys.stdout.write(sweep_csv(rows))
    return 0


def cmd_dump_synthetic(args) -> int:
    """Encode a synthetic task with the frozen towers and write a container."""
    cfg = config_from_args(args)
    rng = Rng(args.seed)
    task = generate_task(cfg.generator_spec(args.seed), rng.fork("task"))
    model = build_model(cfg.tower_config(), "frozen", tau=cfg.tau)
    with ad.no_grad():
        img = model.encode_images(task.inputs).data
        cls = model.encode_classes(task.class_tokens).data
    write_container(args.path, img, cls, task.labels)
    print(f"wrote {args.path}: N={len(task.labels)} d={img.shape[1]} K={task.K}")
    return 0


def cmd_import_check(args) -> int:
    task = import_embeddings(args.path)
    counts = np.bincount(task.labels, minlength=task.K)
    print(f"ok {args.path}: N={task.num_samples} d={task.embeddings.shape[1]} K={task.K} "
          f"min_per_class={counts.min()}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="limo", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="multi-seed benchmark")
    _add_run_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="vary one loss weight, others fixed")
    _add_run_flags(p)
    p.add_argument("--parameter", required=True, choices=SWEEPABLE)
    p.add_argument("--values", required=True, type=_float_list, help="e.g. 0.1,1,10")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("dump-synthetic", help="write frozen-tower embeddings of a synthetic task")
    _add_run_flags(p)
    p.add_argument("path", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_dump_synthetic)

    p = sub.add_parser("import-check", help="validate an embedding container")
    p.add_argument("path", type=Path)
    p.set_defaults(func=cmd_import_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (LimoError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
