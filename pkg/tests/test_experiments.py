"""Experiment drivers: config parsing, output layout, sweeps, and reports."""

from __future__ import annotations

import json
import logging
import os

import numpy as np
import pytest

from shiftlab import (
    AblationMask,
    ExperimentConfig,
    ModelConfig,
    OutputExistsError,
    RunReport,
    ShiftSpec,
    TrainConfig,
    ablate,
    parse_config,
    run_experiment,
    run_single,
    sweep_if,
)
from shiftlab.experiments import (
    _fmt,
    apply_overrides,
    claim_output_dir,
    effective_train_config,
    regenerate_reports,
    resolve_output_dir,
    OUTPUT_ROOT_ENV,
)
from shiftlab.training import ConfigError


def micro_doc(out_dir: str, seeds=None) -> dict:
    return {
        "name": "micro",
        "data": {
            "num_classes": 3,
            "feature_dim": 4,
            "max_class_size": 40,
            "imbalance_factor": 5,
            "target_order": [2, 1, 0],
            "rotation_angle": 0.5235987755982988,
            "seed": 7,
        },
        "model": {
            "input_dim": 4,
            "num_classes": 3,
            "hidden_dims": [16],
            "bottleneck_dim": 6,
            "discriminator_hidden_dims": [8],
        },
        "train": {"epochs": 4, "pretrain_epochs": 2, "batch_size": 16},
        "seeds": seeds or [100],
        "output_dir": out_dir,
    }


class TestParseConfig:
    def test_empty_doc_gives_defaults(self):
        cfg = parse_config({})
        assert cfg.name == "experiment"
        assert cfg.model is None
        assert cfg.seeds == [cfg.train.seed]
        assert cfg.ablation == AblationMask()

    def test_full_doc(self, tmp_path):
        cfg = parse_config(micro_doc(str(tmp_path), seeds=[1, 2]))
        assert cfg.data.num_classes == 3
        assert cfg.model.hidden_dims == [16]
        assert cfg.train.epochs == 4
        assert cfg.seeds == [1, 2]

    def test_unknown_root_key(self):
        with pytest.raises(ConfigError):
            parse_config({"nam": "typo"})

    def test_unknown_nested_key(self):
        with pytest.raises(ConfigError):
            parse_config({"train": {"learning_rate": 0.1}})

    def test_invalid_nested_value(self):
        with pytest.raises(ConfigError):
            parse_config({"train": {"momentum": 2.0}})

    def test_seeds_must_be_int_list(self):
        with pytest.raises(ConfigError):
            parse_config({"seeds": "100"})
        with pytest.raises(ConfigError):
            parse_config({"seeds": [1.5]})

    def test_root_must_be_object(self):
        with pytest.raises(ConfigError):
            parse_config([1, 2])


class TestApplyOverrides:
    def test_dotted_paths_and_json_values(self):
        doc: dict = {}
        apply_overrides(
            doc,
            ["train.lr0=0.01", "ablation.label_shift_calibration=false", "name=sweep3"],
        )
        assert doc == {
            "train": {"lr0": 0.01},
            "ablation": {"label_shift_calibration": False},
            "name": "sweep3",
        }

    def test_string_fallback(self):
        doc: dict = {}
        apply_overrides(doc, ["output_dir=out/run one"])
        assert doc["output_dir"] == "out/run one"

    def test_missing_equals(self):
        with pytest.raises(ConfigError):
            apply_overrides({}, ["train.lr0"])

    def test_crossing_scalar(self):
        with pytest.raises(ConfigError):
            apply_overrides({"train": 3}, ["train.lr0=0.1"])


class TestEffectiveTrainConfig:
    def test_full_mask_is_identity(self):
        cfg = TrainConfig()
        out = effective_train_config(cfg, AblationMask())
        assert out == cfg

    def test_disabled_components_zeroed(self):
        cfg = TrainConfig()
        mask = AblationMask(
            domain_adversarial=False,
            centroid_alignment=True,
            discriminative_alignment=False,
            label_shift_calibration=False,
        )
        out = effective_train_config(cfg, mask)
        assert out.adversarial_loss_weight == 0.0
        assert out.centroid_loss_weight == cfg.centroid_loss_weight
        assert out.pairwise_loss_weight == 0.0
        assert out.lsc_enabled is False

    def test_unconsumed_calibration_warns(self, caplog):
        mask = AblationMask(
            domain_adversarial=True,
            centroid_alignment=False,
            discriminative_alignment=False,
            label_shift_calibration=True,
        )
        with caplog.at_level(logging.WARNING):
            out = effective_train_config(TrainConfig(), mask)
        assert out.lsc_enabled is True
        assert "cannot influence training" in caplog.text

    def test_from_names(self):
        mask = AblationMask.from_names(("domain_adversarial", "centroid_alignment"))
        assert mask.domain_adversarial and mask.centroid_alignment
        assert not mask.discriminative_alignment
        assert not mask.label_shift_calibration


class TestOutputDirs:
    def test_env_root_joins_relative(self, monkeypatch, tmp_path):
        monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
        assert resolve_output_dir("exp1") == str(tmp_path / "exp1")
        assert resolve_output_dir("/abs/exp1") == "/abs/exp1"

    def test_no_env_is_passthrough(self, monkeypatch):
        monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
        assert resolve_output_dir("exp1") == "exp1"

    def test_refuses_nonempty_without_force(self, tmp_path):
        out = tmp_path / "exp"
        out.mkdir()
        (out / "old.txt").write_text("x")
        with pytest.raises(OutputExistsError):
            claim_output_dir(str(out), force=False)
        assert claim_output_dir(str(out), force=True) == str(out)

    def test_refuses_file_path(self, tmp_path):
        f = tmp_path / "file"
        f.write_text("x")
        with pytest.raises(OutputExistsError):
            claim_output_dir(str(f), force=True)

    def test_empty_dir_adopted(self, tmp_path):
        out = tmp_path / "fresh"
        out.mkdir()
        assert claim_output_dir(str(out), force=False) == str(out)


@pytest.fixture(scope="module")
def micro_experiment(tmp_path_factory):
    out = tmp_path_factory.mktemp("exp") / "micro"
    cfg = parse_config(micro_doc(str(out), seeds=[100, 101]))
    reports = run_experiment(cfg)
    return cfg, reports, str(out)


class TestRunExperiment:
    def test_report_fields(self, micro_experiment):
        _, reports, _ = micro_experiment
        assert [r.seed for r in reports] == [100, 101]
        for r in reports:
            assert r.name == "micro"
            assert 0.0 <= r.final_per_class_mean_acc <= 1.0
            assert len(r.final_per_class_acc) == 3
            assert len(r.records) == 4
            assert r.label_shift is not None
            assert r.dist_l1_error is not None
            assert r.true_head_class == 2
            assert r.wall_clock_sec > 0.0

    def test_manifest_and_artifacts(self, micro_experiment):
        _, _, out = micro_experiment
        manifest = json.loads(open(os.path.join(out, "manifest.json")).read())
        assert manifest["completed"] == [100, 101]
        assert manifest["failed"] == []
        config_echo = json.loads(open(os.path.join(out, "config.json")).read())
        assert config_echo["train"]["epochs"] == 4
        for seed in (100, 101):
            run_dir = os.path.join(out, "runs", f"seed{seed}")
            for name in ("report.json", "checkpoint.json", "epoch_records.jsonl", "label_shift.json"):
                assert os.path.isfile(os.path.join(run_dir, name)), name

    def test_aggregate_and_csv(self, micro_experiment):
        _, reports, out = micro_experiment
        agg = json.loads(open(os.path.join(out, "aggregate.json")).read())
        accs = [r.final_per_class_mean_acc for r in reports]
        assert agg["per_seed_accuracy"] == pytest.approx(accs)
        assert agg["mean_accuracy"] == pytest.approx(float(np.mean(accs)))
        lines = open(os.path.join(out, "summary.csv")).read().splitlines()
        assert lines[0] == "name,seed,per_class_mean_accuracy,dist_l1_error,wall_clock_sec"
        assert len(lines) == 1 + len(reports) + 2  # runs + mean + stddev rows
        assert lines[1].startswith("micro,100,")

    def test_plotdata_files(self, micro_experiment):
        _, reports, out = micro_experiment
        plot = os.path.join(out, "plotdata")
        frac = json.loads(open(os.path.join(plot, "calibrated_fraction.json")).read())
        assert frac["epochs"] == [1, 2, 3, 4]
        assert set(frac["per_seed"]) == {"100", "101"}
        dist = json.loads(open(os.path.join(plot, "distribution_estimate.json")).read())
        assert dist["true_target_dist"] == reports[0].true_target_dist
        assert os.path.isfile(os.path.join(plot, "calibrated_subset_accuracy.json"))

    def test_refuses_rerun_without_force(self, micro_experiment):
        cfg, _, _ = micro_experiment
        with pytest.raises(OutputExistsError):
            run_experiment(cfg)

    def test_report_round_trip(self, micro_experiment):
        _, reports, _ = micro_experiment
        blob = json.loads(json.dumps(reports[0].to_dict()))
        assert RunReport.from_dict(blob).to_dict() == reports[0].to_dict()

    def test_regenerate_matches_original(self, micro_experiment, tmp_path):
        _, _, out = micro_experiment
        original = json.loads(open(os.path.join(out, "aggregate.json")).read())
        rebuilt = regenerate_reports(out)
        assert rebuilt == original

    def test_regenerate_needs_runs(self, tmp_path):
        with pytest.raises(ConfigError):
            regenerate_reports(str(tmp_path))


class TestRunSingle:
    def test_source_only_report_has_no_shift(self, tiny_pair, tiny_model_cfg, tmp_path):
        src, tgt = tiny_pair
        cfg = TrainConfig(
            epochs=4,
            pretrain_epochs=2,
            batch_size=16,
            centroid_loss_weight=0.0,
            pairwise_loss_weight=0.0,
            adversarial_loss_weight=0.0,
            lsc_enabled=False,
        )
        report = run_single(src, tgt, cfg, tiny_model_cfg, "baseline", str(tmp_path / "r"))
        assert report.label_shift is None
        assert report.dist_l1_error is None
        assert report.est_head_class is None
        assert os.path.isfile(tmp_path / "r" / "report.json")


class TestCsvFormatting:
    def test_six_significant_digits(self):
        assert _fmt(0.123456789) == "0.123457"
        assert _fmt(1234567.0) == "1.23457e+06"
        assert _fmt(None) == ""
        assert _fmt("mean") == "mean"
        assert _fmt(7) == "7"


class TestAblate:
    def test_ladder_runs_all_rungs(self, tmp_path):
        doc = micro_doc(str(tmp_path / "ladder"))
        doc["train"]["epochs"] = 3
        doc["train"]["pretrain_epochs"] = 1
        results = ablate(parse_config(doc))
        assert list(results) == [
            "source_only",
            "adversarial",
            "adversarial_centroid",
            "adversarial_centroid_pairwise",
            "full",
        ]
        for agg in results.values():
            assert 0.0 <= agg["mean_accuracy"] <= 1.0
        lines = open(tmp_path / "ladder" / "summary.csv").read().splitlines()
        assert lines[0] == "component_set,mean_accuracy,stddev_accuracy"
        assert len(lines) == 6


class TestSweepIf:
    def test_sweep_table_and_plotdata(self, tmp_path):
        doc = micro_doc(str(tmp_path / "sweep"))
        doc["train"]["epochs"] = 3
        doc["train"]["pretrain_epochs"] = 1
        table = sweep_if(parse_config(doc), [1, 5])
        assert set(table) == {"1", "5"}
        assert set(table["1"]) == {"full", "no_calibration", "source_only"}
        plot = json.loads(open(tmp_path / "sweep" / "plotdata" / "if_sweep.json").read())
        assert plot["if_values"] == [1.0, 5.0]
        assert len(plot["methods"]["full"]) == 2

    def test_rejects_bad_factors(self, tmp_path):
        cfg = parse_config(micro_doc(str(tmp_path / "bad")))
        with pytest.raises(ConfigError):
            sweep_if(cfg, [])
        with pytest.raises(ConfigError):
            sweep_if(cfg, [0.5])
