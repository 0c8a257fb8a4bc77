"""Command-line interface: datagen / train / eval / heatmap subcommands."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from .datagen import (
    anchor_budget,
    derive_observation,
    downsample,
    generate_dataset,
    read_dataset,
    write_dataset,
)
from .errors import TaxposedError
from .nets import load_checkpoint
from .pipeline import SuccessCriterion, TrainConfig, evaluate, export_prior_heatmap, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taxposed")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", type=Path, default=None, help="JSON config file")
        p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("datagen", help="generate a synthetic demonstration dataset")
    common(p)
    p.add_argument("--sites", type=int, required=True, help="placement sites per scene")
    p.add_argument("--n", type=int, required=True, help="number of records")
    p.add_argument("--distractors", type=int, default=0, help="extra valid site copies per record")

    p = sub.add_parser("train", help="train a model on a dataset directory")
    common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--metrics", type=Path, default=None, help="per-step loss CSV")

    p = sub.add_parser("eval", help="evaluate a checkpoint distributionally")
    common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--samples-per-scene", type=int, default=100)
    p.add_argument("--tol-r", type=float, default=15.0, help="rotation tolerance, degrees")
    p.add_argument("--tol-t", type=float, default=0.1, help="translation tolerance, scene units")

    p = sub.add_parser("heatmap", help="export per-point prior probabilities for a scene")
    common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--index", type=int, default=0, help="record index within the dataset")
    return parser


def _load_config(args) -> TrainConfig:
    data = {}
    if args.config is not None:
        data = json.loads(args.config.read_text())
    config = TrainConfig.from_dict(data)
    seed = args.seed
    if os.environ.get("TAXPOSED_SEED"):
        seed = int(os.environ["TAXPOSED_SEED"])
    if seed is not None:
        config = dataclasses.replace(config, seed=seed)
    return config


def cli(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code not in (0, None) else EXIT_OK

    try:
        config = _load_config(args)
    except (ValueError, TypeError, OSError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "datagen":
            records = generate_dataset(args.n, args.sites, config.seed, distractors=args.distractors)
            write_dataset(records, args.out, config={"sites": args.sites, "seed": config.seed})
            print(f"wrote {len(records)} records to {args.out}")
        elif args.command == "train":
            dataset = read_dataset(args.data)
            _, reports = train(config, dataset, metrics_path=args.metrics, checkpoint_path=args.out)
            print(f"trained {config.steps} steps; final loss {reports[-1].total:.6f}; saved {args.out}")
        elif args.command == "eval":
            dataset = read_dataset(args.data)
            model, _ = load_checkpoint(args.checkpoint)
            criterion = SuccessCriterion(tol_R=args.tol_r, tol_t=args.tol_t)
            report = evaluate(
                model,
                dataset,
                samples_per_scene=args.samples_per_scene,
                criterion=criterion,
                seed=config.seed,
                points_per_object=config.points_per_object,
            )
            Path(args.out).write_text(report.to_json())
            print(report.to_json())
        elif args.command == "heatmap":
            dataset = read_dataset(args.data)
            model, _ = load_checkpoint(args.checkpoint)
            import numpy as np

            rng = np.random.default_rng(config.seed)
            record = dataset[args.index]
            record = dataclasses.replace(
                record,
                cloud=downsample(
                    record.cloud, config.points_per_object, rng,
                    anchor_n=anchor_budget(config.points_per_object, record.num_sites),
                ),
            )
            obs = derive_observation(record, rng)
            export_prior_heatmap(model, obs.cloud, args.out)
            print(f"wrote heatmap for record {args.index} to {args.out}")
    except TaxposedError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
