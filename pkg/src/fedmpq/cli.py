"""Command-line entry point: run, partition, inspect, compare."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, inspect_checkpoint
from .config import (
    ConfigError,
    apply_overrides,
    parse_config,
    parse_config_text,
    serialize_config,
)
from .data import load_dataset
from .simulation import PartitionError, dirichlet_partition, run_experiment

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "FEDMPQ_OUTPUT_ROOT"


def _add_override_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--algorithm", help="fedmpq, aqfl, fpq-k, or fp32")
    parser.add_argument("--clients", help="number of clients")
    parser.add_argument("--participation", help="fraction of clients per round")
    parser.add_argument("--rounds", help="number of global rounds")
    parser.add_argument("--budgets", help="comma-separated per-client bit budgets")
    parser.add_argument("--alpha", help="Dirichlet concentration")
    parser.add_argument("--seed", help="master seed")
    parser.add_argument("--fpq-bits", dest="fpq_bits", help="uniform width for fpq-k")
    parser.add_argument("--use-lasso", dest="use_lasso", help="true/false")
    parser.add_argument("--use-msb-pruning", dest="use_msb_pruning", help="true/false")
    parser.add_argument(
        "--use-bit-reallocation", dest="use_bit_reallocation", help="true/false"
    )
    parser.add_argument("--workers", help="parallel client updates")
    parser.add_argument("--local-epochs", dest="local_epochs", help="epochs per round")
    parser.add_argument("--learning-rate", dest="learning_rate", help="SGD step size")
    parser.add_argument("--lasso-coeff", dest="lasso_coeff", help="regularizer weight")
    parser.add_argument(
        "--prune-threshold", dest="prune_threshold", help="MSB density threshold"
    )
    parser.add_argument("--scale-policy", dest="scale_policy", help="max-abs or range-covering")
    parser.add_argument("--partition", help="pre-built shard file to reuse")


def _collect_overrides(args: argparse.Namespace) -> dict[str, str]:
    from .config import OVERRIDE_KEYS

    return {flag: getattr(args, flag) for flag in OVERRIDE_KEYS if getattr(args, flag, None)}


def _load_config_with_overrides(args: argparse.Namespace):
    text = Path(args.config).read_text()
    overrides = _collect_overrides(args)
    if overrides:
        text = apply_overrides(text, overrides)
    config = parse_config_text(text)
    return config, serialize_config(config)


def _default_out_dir(config, config_path: str) -> Path:
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    stem = Path(config_path).stem
    return root / f"{stem}-{config.algorithm}-seed{config.seed}"


def _load_partition_file(path: str, n_clients: int) -> list[np.ndarray]:
    record = json.loads(Path(path).read_text())
    shards = [np.asarray(s, dtype=np.int64) for s in record["shards"]]
    if len(shards) != n_clients:
        raise ConfigError(
            f"partition file holds {len(shards)} shards but the config has "
            f"{n_clients} clients"
        )
    return shards


def cmd_run(args: argparse.Namespace) -> int:
    try:
        config, canonical = _load_config_with_overrides(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return 2
    out_dir = Path(args.out) if args.out else _default_out_dir(config, args.config)
    shards = None
    if config.data.partition:
        shards = _load_partition_file(config.data.partition, config.clients)
    try:
        metrics, _ = run_experiment(config, out_dir, shards, canonical)
    except (PartitionError, ValueError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1
    final = metrics[-1]
    print(
        f"{config.algorithm} seed={config.seed}: {len(metrics)} metric rows, "
        f"final accuracy {final.test_accuracy:.4f} -> {out_dir}"
    )
    return 0


def cmd_partition(args: argparse.Namespace) -> int:
    try:
        config, _ = _load_config_with_overrides(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    dataset = load_dataset(config.data, config.seed)
    try:
        shards = dirichlet_partition(
            dataset.train_y, config.clients, config.alpha, config.seed
        )
    except PartitionError as exc:
        print(f"partition failed: {exc}", file=sys.stderr)
        return 1
    record = {
        "alpha": config.alpha,
        "seed": config.seed,
        "clients": config.clients,
        "shards": [[int(i) for i in shard] for shard in shards],
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(record, sort_keys=True) + "\n")
    sizes = ", ".join(str(len(s)) for s in shards)
    print(f"wrote {out} with shard sizes [{sizes}]")
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    try:
        report = inspect_checkpoint(args.checkpoint)
    except (CheckpointError, OSError) as exc:
        print(f"inspect failed: {exc}", file=sys.stderr)
        return 1
    print(f"checkpoint: {args.checkpoint}")
    print(f"layers: {len(report.layers)}  average bit-width: {report.average_bit_width:.3f}")
    for layer in report.layers:
        dens = ",".join(f"{d:.4f}" for d in layer.densities)
        print(
            f"layer {layer.index}: {layer.rows}x{layer.cols}  bits={layer.bit_width}  "
            f"scale={layer.scale:.6g}  zero_point={layer.zero_point}  densities={dens}"
        )
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    rows = []
    for run_dir in args.runs:
        run = Path(run_dir)
        metrics_path = run / "metrics.csv"
        manifest_path = run / "manifest.json"
        if not metrics_path.exists():
            print(f"skipping {run}: no metrics.csv", file=sys.stderr)
            continue
        with open(metrics_path) as fh:
            last = list(csv.DictReader(fh))[-1]
        algorithm, seed = run.name, ""
        if manifest_path.exists():
            manifest = json.loads(manifest_path.read_text())
            algorithm = manifest.get("algorithm", algorithm)
            seed = manifest.get("seed", "")
        rows.append((algorithm, seed, float(last["test_accuracy"]), run_dir))
    if not rows:
        print("nothing to compare", file=sys.stderr)
        return 1
    print(f"{'algorithm':<10} {'seed':>6} {'final_acc':>10}  run")
    for algorithm, seed, acc, run_dir in sorted(rows):
        print(f"{algorithm:<10} {seed!s:>6} {acc:>10.4f}  {run_dir}")
    by_algo: dict[str, list[float]] = {}
    for algorithm, _, acc, _ in rows:
        by_algo.setdefault(algorithm, []).append(acc)
    print("medians:")
    for algorithm in sorted(by_algo):
        print(f"  {algorithm:<10} {float(np.median(by_algo[algorithm])):.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedmpq")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute an experiment config")
    run.add_argument("config")
    run.add_argument("--out", help="output directory")
    _add_override_flags(run)
    run.set_defaults(func=cmd_run)

    part = sub.add_parser("partition", help="materialize Dirichlet shards")
    part.add_argument("config")
    part.add_argument("--out", required=True, help="shard file to write")
    _add_override_flags(part)
    part.set_defaults(func=cmd_partition)

    insp = sub.add_parser("inspect", help="summarize a checkpoint")
    insp.add_argument("checkpoint")
    insp.set_defaults(func=cmd_inspect)

    comp = sub.add_parser("compare", help="tabulate final accuracy across runs")
    comp.add_argument("runs", nargs="+")
    comp.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
