"""Command-line surface.

Subcommands: gen-data, train, eval, sweep-if, ablate, report. All take a
JSON config plus repeatable --set key=value overrides with dotted paths.
Exit codes: 0 success, 1 config error, 2 runtime or numeric failure,
3 refused overwrite of an existing output directory.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .data import DatasetFormatError, ParameterError, generate, save_dataset
from .experiments import (
    OutputExistsError,
    apply_overrides,
    claim_output_dir,
    parse_config,
    regenerate_reports,
    run_experiment,
    sweep_if,
    ablate,
)
from .metrics import EVALUATOR_ACCESS, per_class_accuracies, per_class_mean_accuracy
from .networks import load_checkpoint, classify, features
from .training import ConfigError

__all__ = ["main"]

log = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    # Usage mistakes are config errors (exit 1), not runtime failures.
    def error(self, message: str):
        raise ConfigError(message)


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON experiment config file")
    sub.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config field by dotted path (repeatable)",
    )
    sub.add_argument("--seed", type=int, help="replace the seed list with this single seed")
    sub.add_argument("--out", help="override the config's output directory")
    sub.add_argument("--force", action="store_true", help="write into a non-empty output dir")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="shiftlab", description=__doc__)
    commands = parser.add_subparsers(dest="command", required=True)

    _add_common(commands.add_parser("gen-data", help="generate and save a dataset pair"))
    _add_common(commands.add_parser("train", help="train every configured seed"))

    ev = commands.add_parser("eval", help="evaluate a checkpoint on the configured target data")
    _add_common(ev)
    ev.add_argument("--checkpoint", required=True, help="checkpoint JSON written by train")

    sw = commands.add_parser("sweep-if", help="sweep the imbalance factor")
    _add_common(sw)
    sw.add_argument(
        "--if-values",
        default="1,5,10,20",
        help="comma-separated imbalance factors (default 1,5,10,20)",
    )

    _add_common(commands.add_parser("ablate", help="run the component ablation ladder"))

    rp = commands.add_parser("report", help="rebuild aggregate outputs from run reports")
    rp.add_argument("--dir", required=True, help="experiment output directory")
    return parser


def _load_config(args) -> "ExperimentConfig":
    doc: dict = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{args.config}: invalid JSON: {exc}") from exc
    apply_overrides(doc, args.overrides)
    if args.seed is not None:
        doc["seeds"] = [args.seed]
        doc.setdefault("train", {})["seed"] = args.seed
    if args.out:
        doc["output_dir"] = args.out
    return parse_config(doc)


def _cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out_dir = claim_output_dir(cfg.output_dir, args.force)
    source, target = generate(cfg.data)
    save_dataset(source, os.path.join(out_dir, "source.csv"))
    save_dataset(target, os.path.join(out_dir, "target.csv"))
    import dataclasses

    with open(os.path.join(out_dir, "spec.json"), "w", encoding="utf-8") as fh:
        json.dump(dataclasses.asdict(cfg.data), fh, indent=2)
    print(f"wrote {len(source)} source and {len(target)} target samples to {out_dir}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    reports = run_experiment(cfg, force=args.force)
    accs = [r.final_per_class_mean_acc for r in reports]
    print(
        json.dumps(
            {
                "name": cfg.name,
                "seeds": cfg.seeds,
                "per_seed_accuracy": accs,
                "mean_accuracy": float(np.mean(accs)),
            }
        )
    )
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_config(args)
    state = load_checkpoint(args.checkpoint)
    _, target = generate(cfg.data)
    preds = np.argmax(classify(state, features(state, target.features)).values, axis=1)
    truth = target.labels_for_eval(EVALUATOR_ACCESS)
    print(
        json.dumps(
            {
                "per_class_mean_accuracy": per_class_mean_accuracy(preds, truth, target.num_classes),
                "per_class_accuracy": per_class_accuracies(preds, truth, target.num_classes),
                "samples": len(target),
            }
        )
    )
    return 0


def _cmd_sweep_if(args) -> int:
    cfg = _load_config(args)
    try:
        values = [float(v) for v in args.if_values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"--if-values: {exc}") from exc
    table = sweep_if(cfg, values, force=args.force)
    print(json.dumps(table))
    return 0


def _cmd_ablate(args) -> int:
    cfg = _load_config(args)
    results = ablate(cfg, force=args.force)
    print(json.dumps({rung: agg["mean_accuracy"] for rung, agg in results.items()}))
    return 0


def _cmd_report(args) -> int:
    aggregate = regenerate_reports(args.dir)
    print(json.dumps(aggregate))
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep-if": _cmd_sweep_if,
    "ablate": _cmd_ablate,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return _COMMANDS[args.command](args)
    except (ConfigError, ParameterError, DatasetFormatError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 1
    except OutputExistsError as exc:
        log.error("%s", exc)
        return 3
    except Exception as exc:  # runtime / numeric failures
        log.error("%s: %s", type(exc).__name__, exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
