"""Command-line entry point.

Subcommands: `train` (meta-train on a source dataset directory or generated
rotated domains), `adapt` (run one strategy over a target stream from a
checkpoint), `eval <protocol>` (the experiment drivers), and `report`
(regenerate plots from stored metrics).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import torch

from . import harness
from .io import CheckpointError, load_checkpoint, save_checkpoint
from .metatrain import TrainConfig, train
from .synthdata import import_datasets, make_rotated_domains, stream
from .ttg import STRATEGY_NAMES, make_strategy, run_stream

TTG_LOSSES = {"entropy": "entropy", "pseudo": "pseudo_label", "memo": "augmentation_consistency"}

EVAL_PROTOCOLS = ("loo", "forgetting", "multitarget", "batchsweep", "inputs", "layers",
                  "distance", "timing")


def _parse_seeds(raw: str) -> list[int]:
    return [int(s) for s in raw.split(",") if s]


def _parse_angles(raw: str) -> list[float]:
    return [float(s) for s in raw.split(",") if s]


def _load_datasets(args) -> list:
    if args.data is not None:
        return import_datasets(args.data)
    return make_rotated_domains(args.seed, _parse_angles(args.angles), args.n_per_domain)


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="dataset directory (exported format); overrides --angles")
    p.add_argument("--angles", default="0,30,60,90", help="rotation angles for generated domains")
    p.add_argument("--n-per-domain", type=int, default=harness.DEFAULT_N_PER_DOMAIN)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ttgen", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="meta-train backbone and generator")
    p_train.add_argument("--config", help="JSON file mirroring the training config")
    p_train.add_argument("--out", required=True, help="output directory (checkpoint + metrics)")
    p_train.add_argument("--n-iter", type=int, default=None)
    p_train.add_argument("--ttg-loss", choices=sorted(TTG_LOSSES), default=None,
                         help="unsupervised loss for gradient tokens")
    p_train.add_argument("--gen-layers", type=int, choices=(2, 4, 8), default=None,
                         help="generator transformer depth")
    _add_data_args(p_train)

    p_adapt = sub.add_parser("adapt", help="run one strategy over a target stream")
    p_adapt.add_argument("--ckpt", required=True, help="checkpoint directory")
    p_adapt.add_argument("--strategy", choices=STRATEGY_NAMES, default="generalizeformer")
    p_adapt.add_argument("--stream", required=True,
                         help="dataset directory, streamed as target batches")
    p_adapt.add_argument("--batch-size", type=int, default=harness.DEFAULT_BATCH)
    p_adapt.add_argument("--order", choices=("single_domain", "interleaved_random"),
                         default="single_domain")
    p_adapt.add_argument("--ttg-loss", choices=sorted(TTG_LOSSES), default="entropy")
    p_adapt.add_argument("--out", help="write metrics.jsonl and summary.csv here")
    p_adapt.add_argument("--seed", type=int, default=0)

    p_eval = sub.add_parser("eval", help="run an experiment protocol")
    p_eval.add_argument("protocol", choices=EVAL_PROTOCOLS)
    p_eval.add_argument("--out", help="output directory for metrics and plots")
    p_eval.add_argument("--seeds", default="0,1,2,3,4")
    p_eval.add_argument("--n-iter", type=int, default=harness.DEFAULT_N_ITER)
    p_eval.add_argument("--n-per-domain", type=int, default=harness.DEFAULT_N_PER_DOMAIN)
    p_eval.add_argument("--batch-size", type=int, default=harness.DEFAULT_BATCH)
    p_eval.add_argument("--ttg-loss", choices=sorted(TTG_LOSSES), default="entropy")
    p_eval.add_argument("--angles", default="0,30,60,90")

    p_report = sub.add_parser("report", help="regenerate plots from stored metrics")
    p_report.add_argument("--out", required=True, help="experiment directory with metrics.jsonl")

    return parser


def cmd_train(args) -> int:
    if args.config:
        config = TrainConfig.from_dict(json.loads(Path(args.config).read_text()))
    else:
        config = TrainConfig(seed=args.seed)
    if args.n_iter is not None:
        config.n_iter = args.n_iter
    if args.ttg_loss is not None:
        config.grad_loss = TTG_LOSSES[args.ttg_loss]
    if args.gen_layers is not None:
        config.generator.n_layers = args.gen_layers
    datasets = _load_datasets(args)
    result = train(config, datasets, out_dir=args.out)
    save_checkpoint(args.out, result.backbone, result.generator, config.to_dict())
    print(f"trained {config.n_iter} iterations; checkpoint written to {args.out}")
    return 0


def cmd_adapt(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    datasets = import_datasets(args.stream)
    st = stream(datasets, args.batch_size, args.order, args.seed)
    if args.strategy == "generalizeformer":
        strategy = make_strategy(args.strategy, ckpt.backbone, ckpt.generator,
                                 grad_loss=TTG_LOSSES[args.ttg_loss])
    else:
        strategy = make_strategy(args.strategy, ckpt.backbone, ckpt.generator)
    metrics = run_stream(st, strategy)
    print(f"{args.strategy}: accuracy {metrics.accuracy:.4f} over {len(metrics.records)} batches, "
          f"median adapt {metrics.median_adapt_ms:.2f} ms")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        harness.write_jsonl(out / "metrics.jsonl",
                            [{k: v for k, v in r.items()} for r in metrics.records])
        with open(out / "summary.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["strategy", "accuracy", "batches", "median_adapt_ms"])
            writer.writerow([args.strategy, metrics.accuracy, len(metrics.records),
                             metrics.median_adapt_ms])
    return 0


def cmd_eval(args) -> int:
    seeds = _parse_seeds(args.seeds)
    angles = _parse_angles(args.angles)
    grad_loss = TTG_LOSSES[args.ttg_loss]
    common = dict(seeds=seeds, n_per_domain=args.n_per_domain, n_iter=args.n_iter,
                  grad_loss=grad_loss, out_dir=args.out)
    if args.protocol == "loo":
        report = harness.eval_leave_one_out(angles=angles, batch_size=args.batch_size, **common)
    elif args.protocol == "forgetting":
        report = harness.eval_forgetting(angles=angles, batch_size=args.batch_size, **common)
    elif args.protocol == "multitarget":
        report = harness.eval_multi_target(batch_size=args.batch_size, **common)
    elif args.protocol == "batchsweep":
        report = harness.sweep_batch_size(angles=angles, **common)
    elif args.protocol == "inputs":
        report = harness.ablate_inputs(angles=angles, batch_size=args.batch_size, **common)
    elif args.protocol == "layers":
        report = harness.ablate_generated_layers(angles=angles, batch_size=args.batch_size, **common)
    elif args.protocol == "distance":
        report = harness.layer_distance_report(batch_size=args.batch_size, **common)
    else:  # timing
        domains = make_rotated_domains(seeds[0] if seeds else 0, angles, args.n_per_domain)
        result = train(TrainConfig(n_iter=args.n_iter, seed=seeds[0] if seeds else 0,
                                   grad_loss=grad_loss), domains[:-1])
        strategies = {
            name: make_strategy(name, result.backbone, result.generator)
            for name in STRATEGY_NAMES
        }
        st = stream([domains[-1]], args.batch_size, "single_domain", 0)
        report = harness.timing_report(strategies, st, out_dir=args.out)
    for key in sorted(report.summary):
        print(f"{key}: {report.summary[key]:.4f}")
    return 0


def cmd_report(args) -> int:
    paths = harness.regenerate_report(args.out)
    for p in paths:
        print(p)
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(args)
        if args.command == "adapt":
            return cmd_adapt(args)
        if args.command == "eval":
            return cmd_eval(args)
        return cmd_report(args)
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
