"""Experiment orchestration: configs, runs, sweeps, ablations, reports.

One ExperimentConfig describes a dataset recipe, model and training
hyperparameters, an ablation mask over the four method components, and a
list of training seeds. Drivers here expand that into trainer runs,
collect per-run reports, and write aggregates, CSV summaries, and
plot-data JSON. Aggregation is a pure function of the persisted per-run
reports, so everything under an output directory can be rebuilt offline.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .calibration import LabelShiftState
from .data import DomainDataset, ShiftSpec, generate
from .metrics import (
    EVALUATOR_ACCESS,
    make_audit_fn,
    per_class_accuracies,
    per_class_mean_accuracy,
    true_distribution,
)
from .networks import ModelConfig, classify, features
from .training import ConfigError, EpochRecord, TrainConfig, run

__all__ = [
    "OutputExistsError",
    "AblationMask",
    "ExperimentConfig",
    "RunReport",
    "parse_config",
    "apply_overrides",
    "effective_train_config",
    "resolve_output_dir",
    "run_single",
    "run_experiment",
    "ablate",
    "sweep_if",
    "regenerate_reports",
    "OUTPUT_ROOT_ENV",
]

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "SHIFTLAB_OUTPUT_ROOT"

ABLATION_LADDER = [
    ("source_only", ()),
    ("adversarial", ("domain_adversarial",)),
    ("adversarial_centroid", ("domain_adversarial", "centroid_alignment")),
    (
        "adversarial_centroid_pairwise",
        ("domain_adversarial", "centroid_alignment", "discriminative_alignment"),
    ),
    (
        "full",
        (
            "domain_adversarial",
            "centroid_alignment",
            "discriminative_alignment",
            "label_shift_calibration",
        ),
    ),
]

SWEEP_METHODS = {
    "full": (
        "domain_adversarial",
        "centroid_alignment",
        "discriminative_alignment",
        "label_shift_calibration",
    ),
    "no_calibration": (
        "domain_adversarial",
        "centroid_alignment",
        "discriminative_alignment",
    ),
    "source_only": (),
}


class OutputExistsError(RuntimeError):
    """Refused to write into an existing, non-empty output directory."""


@dataclass
class AblationMask:
    domain_adversarial: bool = True
    centroid_alignment: bool = True
    discriminative_alignment: bool = True
    label_shift_calibration: bool = True

    @classmethod
    def from_names(cls, enabled: tuple[str, ...]) -> "AblationMask":
        mask = cls(False, False, False, False)
        for name in enabled:
            setattr(mask, name, True)
        return mask


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    data: ShiftSpec = field(default_factory=ShiftSpec)
    model: ModelConfig | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationMask = field(default_factory=AblationMask)
    seeds: list[int] = field(default_factory=list)
    output_dir: str = "out"

    def __post_init__(self) -> None:
        if not self.seeds:
            self.seeds = [self.train.seed]
        self.seeds = [int(s) for s in self.seeds]


def _field_names(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _check_keys(doc: dict, allowed: set[str], where: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys in {where}: {sorted(unknown)}")


def _build(cls, doc: dict, where: str):
    _check_keys(doc, _field_names(cls), where)
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where} config: {exc}") from exc


def parse_config(doc: dict) -> ExperimentConfig:
    """Build an ExperimentConfig from a JSON document; unknown keys rejected."""
    if not isinstance(doc, dict):
        raise ConfigError(f"config root must be an object, got {type(doc).__name__}")
    allowed = {"name", "data", "model", "train", "ablation", "seeds", "output_dir"}
    _check_keys(doc, allowed, "config root")
    data = _build(ShiftSpec, doc.get("data", {}), "data")
    model = _build(ModelConfig, doc["model"], "model") if "model" in doc else None
    train = _build(TrainConfig, doc.get("train", {}), "train")
    ablation = _build(AblationMask, doc.get("ablation", {}), "ablation")
    seeds = doc.get("seeds", [])
    if not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds):
        raise ConfigError(f"seeds must be a list of integers, got {seeds!r}")
    return ExperimentConfig(
        name=str(doc.get("name", "experiment")),
        data=data,
        model=model,
        train=train,
        ablation=ablation,
        seeds=seeds,
        output_dir=str(doc.get("output_dir", "out")),
    )


def apply_overrides(doc: dict, settings: list[str]) -> dict:
    """Apply --set key=value pairs (dotted paths) onto the raw config dict.

    Values parse as JSON when possible, otherwise as strings, so
    train.lr0=0.01, ablation.label_shift_calibration=false, and
    name=sweep3 all work.
    """
    for setting in settings:
        key, sep, raw = setting.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {setting!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set path {key!r} crosses a non-object value")
        node[parts[-1]] = value
    return doc


def effective_train_config(train: TrainConfig, mask: AblationMask) -> TrainConfig:
    """Zero out the loss weights of disabled components; disable LSC."""
    cfg = dataclasses.replace(
        train,
        adversarial_loss_weight=train.adversarial_loss_weight if mask.domain_adversarial else 0.0,
        centroid_loss_weight=train.centroid_loss_weight if mask.centroid_alignment else 0.0,
        pairwise_loss_weight=train.pairwise_loss_weight if mask.discriminative_alignment else 0.0,
        lsc_enabled=mask.label_shift_calibration,
    )
    if cfg.lsc_enabled and cfg.centroid_loss_weight == 0.0 and cfg.pairwise_loss_weight == 0.0:
        log.warning(
            "calibration is enabled but no loss consumes pseudo-labels; "
            "it will be recorded yet cannot influence training"
        )
    return cfg


def resolve_output_dir(path: str) -> str:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def claim_output_dir(path: str, force: bool) -> str:
    """Create (or adopt) an output directory, refusing non-empty ones."""
    path = resolve_output_dir(path)
    if os.path.exists(path):
        if not os.path.isdir(path):
            raise OutputExistsError(f"output path {path} exists and is not a directory")
        if os.listdir(path) and not force:
            raise OutputExistsError(
                f"output directory {path} already has contents; pass --force to overwrite"
            )
    os.makedirs(path, exist_ok=True)
    return path


@dataclass
class RunReport:
    """Everything measured about one training run."""

    name: str
    seed: int
    wall_clock_sec: float
    records: list[dict]
    final_per_class_acc: list[float | None]
    final_per_class_mean_acc: float
    false_pseudo_rate: list[float | None]
    calibrated_fraction: list[float]
    subset_acc_raw: list[float | None]
    subset_acc_calibrated: list[float | None]
    label_shift: dict | None
    true_target_dist: list[float]
    dist_l1_error: float | None
    est_head_class: int | None
    true_head_class: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunReport":
        return cls(**{f.name: doc[f.name] for f in dataclasses.fields(cls)})


def run_single(
    source: DomainDataset,
    target: DomainDataset,
    train_cfg: TrainConfig,
    model_cfg: ModelConfig | None,
    name: str,
    out_dir: str | None = None,
) -> RunReport:
    """One trainer run plus evaluation, reported and optionally persisted."""
    started = time.perf_counter()
    state, records, shift_state = run(
        source, target, train_cfg, model_cfg, audit_fn=make_audit_fn(target), out_dir=out_dir
    )
    elapsed = time.perf_counter() - started

    probs = classify(state, features(state, target.features)).values
    preds = np.argmax(probs, axis=1)
    truth = target.labels_for_eval(EVALUATOR_ACCESS)
    final_acc = per_class_mean_accuracy(preds, truth, target.num_classes)
    true_dist = true_distribution(target)

    dist_l1 = est_head = None
    if shift_state is not None:
        est = np.asarray(shift_state.target_dist_est)
        dist_l1 = float(np.abs(est - true_dist).sum())
        est_head = int(np.argmax(est))

    report = RunReport(
        name=name,
        seed=train_cfg.seed,
        wall_clock_sec=elapsed,
        records=[r.to_dict() for r in records],
        final_per_class_acc=per_class_accuracies(preds, truth, target.num_classes),
        final_per_class_mean_acc=final_acc,
        false_pseudo_rate=[
            None if r.pseudo_acc_raw is None else 1.0 - r.pseudo_acc_raw for r in records
        ],
        calibrated_fraction=[r.calibrated_fraction for r in records],
        subset_acc_raw=[r.subset_acc_raw for r in records],
        subset_acc_calibrated=[r.subset_acc_calibrated for r in records],
        label_shift=None if shift_state is None else shift_state.to_dict(),
        true_target_dist=true_dist.tolist(),
        dist_l1_error=dist_l1,
        est_head_class=est_head,
        true_head_class=int(np.argmax(true_dist)),
    )
    if out_dir is not None:
        with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2)
    return report


def _config_echo(cfg: ExperimentConfig) -> dict:
    doc = {
        "name": cfg.name,
        "data": dataclasses.asdict(cfg.data),
        "train": dataclasses.asdict(cfg.train),
        "ablation": dataclasses.asdict(cfg.ablation),
        "seeds": cfg.seeds,
        "output_dir": cfg.output_dir,
    }
    if cfg.model is not None:
        doc["model"] = dataclasses.asdict(cfg.model)
    return doc


def _write_json(path: str, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".6g")
    return str(value)


def _write_csv(path: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _mean_series(per_run: list[list[float | None]]) -> list[float | None]:
    """Pointwise mean over runs, skipping None entries."""
    out: list[float | None] = []
    for values in zip(*per_run):
        present = [v for v in values if v is not None]
        out.append(float(np.mean(present)) if present else None)
    return out


def aggregate_reports(name: str, reports: list[RunReport]) -> dict:
    accs = [r.final_per_class_mean_acc for r in reports]
    l1s = [r.dist_l1_error for r in reports if r.dist_l1_error is not None]
    return {
        "name": name,
        "seeds": [r.seed for r in reports],
        "per_seed_accuracy": accs,
        "mean_accuracy": float(np.mean(accs)),
        "stddev_accuracy": float(np.std(accs)),
        "per_seed_dist_l1_error": [r.dist_l1_error for r in reports],
        "mean_dist_l1_error": float(np.mean(l1s)) if l1s else None,
    }


def _write_plotdata(out_dir: str, reports: list[RunReport]) -> None:
    plot_dir = os.path.join(out_dir, "plotdata")
    os.makedirs(plot_dir, exist_ok=True)
    epochs = list(range(1, len(reports[0].records) + 1))
    _write_json(
        os.path.join(plot_dir, "calibrated_fraction.json"),
        {
            "epochs": epochs,
            "per_seed": {str(r.seed): r.calibrated_fraction for r in reports},
            "mean": _mean_series([r.calibrated_fraction for r in reports]),
        },
    )
    _write_json(
        os.path.join(plot_dir, "calibrated_subset_accuracy.json"),
        {
            "epochs": epochs,
            "subset_acc_raw": _mean_series([r.subset_acc_raw for r in reports]),
            "subset_acc_calibrated": _mean_series([r.subset_acc_calibrated for r in reports]),
            "per_seed_raw": {str(r.seed): r.subset_acc_raw for r in reports},
            "per_seed_calibrated": {str(r.seed): r.subset_acc_calibrated for r in reports},
        },
    )
    shifted = [r for r in reports if r.label_shift is not None]
    if shifted:
        first = shifted[0]
        _write_json(
            os.path.join(plot_dir, "distribution_estimate.json"),
            {
                "classes": list(range(len(first.true_target_dist))),
                "source_dist": first.label_shift["source_dist"],
                "estimated_target_dist_per_seed": {
                    str(r.seed): r.label_shift["target_dist_est"] for r in shifted
                },
                "true_target_dist": first.true_target_dist,
            },
        )


def _summarize(out_dir: str, name: str, reports: list[RunReport]) -> dict:
    aggregate = aggregate_reports(name, reports)
    _write_json(os.path.join(out_dir, "aggregate.json"), aggregate)
    rows = [
        [name, r.seed, r.final_per_class_mean_acc, r.dist_l1_error, r.wall_clock_sec]
        for r in reports
    ]
    rows.append([name, "mean", aggregate["mean_accuracy"], aggregate["mean_dist_l1_error"], None])
    rows.append([name, "stddev", aggregate["stddev_accuracy"], None, None])
    _write_csv(
        os.path.join(out_dir, "summary.csv"),
        ["name", "seed", "per_class_mean_accuracy", "dist_l1_error", "wall_clock_sec"],
        rows,
    )
    _write_plotdata(out_dir, reports)
    return aggregate


def run_experiment(cfg: ExperimentConfig, force: bool = False) -> list[RunReport]:
    """Run every seed of one experiment and write all artifacts.

    A manifest marks which seeds completed, so a failed run leaves the
    finished ones usable. Failures still propagate after the manifest is
    updated.
    """
    out_dir = claim_output_dir(cfg.output_dir, force)
    _write_json(os.path.join(out_dir, "config.json"), _config_echo(cfg))
    manifest = {"name": cfg.name, "seeds": cfg.seeds, "completed": [], "failed": []}
    manifest_path = os.path.join(out_dir, "manifest.json")
    _write_json(manifest_path, manifest)

    source, target = generate(cfg.data)
    train_cfg = effective_train_config(cfg.train, cfg.ablation)
    reports: list[RunReport] = []
    for seed in cfg.seeds:
        seeded = dataclasses.replace(train_cfg, seed=seed)
        run_dir = os.path.join(out_dir, "runs", f"seed{seed}")
        os.makedirs(run_dir, exist_ok=True)
        try:
            reports.append(run_single(source, target, seeded, cfg.model, cfg.name, run_dir))
        except Exception as exc:
            manifest["failed"].append({"seed": seed, "error": str(exc)})
            _write_json(manifest_path, manifest)
            raise
        manifest["completed"].append(seed)
        _write_json(manifest_path, manifest)

    _summarize(out_dir, cfg.name, reports)
    return reports


def ablate(cfg: ExperimentConfig, force: bool = False) -> dict[str, dict]:
    """Run the cumulative component ladder and tabulate mean accuracies."""
    out_dir = claim_output_dir(cfg.output_dir, force)
    results: dict[str, dict] = {}
    for rung_name, enabled in ABLATION_LADDER:
        sub = dataclasses.replace(
            cfg,
            name=rung_name,
            ablation=AblationMask.from_names(enabled),
            output_dir=os.path.join(out_dir, rung_name),
        )
        reports = run_experiment(sub, force=force)
        results[rung_name] = aggregate_reports(rung_name, reports)
    rows = [
        [rung, agg["mean_accuracy"], agg["stddev_accuracy"]]
        for rung, agg in results.items()
    ]
    _write_csv(
        os.path.join(out_dir, "summary.csv"),
        ["component_set", "mean_accuracy", "stddev_accuracy"],
        rows,
    )
    _write_json(os.path.join(out_dir, "aggregate.json"), results)
    return results


def sweep_if(cfg: ExperimentConfig, if_values: list[float], force: bool = False) -> dict:
    """Run full / no-calibration / source-only at each imbalance factor."""
    if not if_values or any(v < 1 for v in if_values):
        raise ConfigError(f"imbalance factors must all be >= 1, got {if_values}")
    out_dir = claim_output_dir(cfg.output_dir, force)
    table: dict[str, dict[str, float]] = {}
    for if_value in if_values:
        row: dict[str, float] = {}
        for method, enabled in SWEEP_METHODS.items():
            sub = dataclasses.replace(
                cfg,
                name=f"{method}_if{if_value:g}",
                data=dataclasses.replace(cfg.data, imbalance_factor=float(if_value)),
                ablation=AblationMask.from_names(enabled),
                output_dir=os.path.join(out_dir, f"if{if_value:g}", method),
            )
            reports = run_experiment(sub, force=force)
            row[method] = aggregate_reports(sub.name, reports)["mean_accuracy"]
        table[f"{if_value:g}"] = row
    methods = list(SWEEP_METHODS)
    _write_csv(
        os.path.join(out_dir, "summary.csv"),
        ["imbalance_factor"] + methods,
        [[key] + [row[m] for m in methods] for key, row in table.items()],
    )
    plot_dir = os.path.join(out_dir, "plotdata")
    os.makedirs(plot_dir, exist_ok=True)
    _write_json(
        os.path.join(plot_dir, "if_sweep.json"),
        {
            "if_values": [float(v) for v in if_values],
            "methods": {m: [table[f"{v:g}"][m] for v in if_values] for m in methods},
        },
    )
    _write_json(os.path.join(out_dir, "aggregate.json"), table)
    return table


def regenerate_reports(out_dir: str) -> dict:
    """Rebuild aggregate, summary, and plot data from persisted run reports."""
    out_dir = resolve_output_dir(out_dir)
    runs_dir = os.path.join(out_dir, "runs")
    if not os.path.isdir(runs_dir):
        raise ConfigError(f"{out_dir} has no runs/ directory to aggregate")
    reports = []
    for entry in sorted(os.listdir(runs_dir)):
        path = os.path.join(runs_dir, entry, "report.json")
        if os.path.isfile(path):
            with open(path, "r", encoding="utf-8") as fh:
                reports.append(RunReport.from_dict(json.load(fh)))
    if not reports:
        raise ConfigError(f"no run reports found under {runs_dir}")
    return _summarize(out_dir, reports[0].name, reports)
