#!/usr/bin/env python3
"""Tests for MAE aggregation, report output and runtime measurement."""

import csv

import numpy as np
import pytest

from regerr.dataset import load_entry_record
from regerr.errors import EmptySplitError, FormatError, ShapeError
from regerr.evaluator import (
    EvalReport,
    PatchResult,
    aggregate,
    emit_report,
    evaluate,
    ground_truth_predictor,
    load_report,
    mean_error,
    mean_predictor_baseline,
    measure_runtime,
    patch_mae,
    save_histogram,
)
from regerr.manifest import load_manifest
from regerr.network import ModelConfig, build_model


def cohort_results(n_subjects=22, per_subject=15):
    rng = np.random.default_rng(0)
    return [
        PatchResult(record_id=f"P{s:02d}_L{l:02d}_0", patient_id=f"P{s:02d}", mae=float(rng.uniform(0.5, 3.0)))
        for s in range(n_subjects)
        for l in range(per_subject)
    ]


class TestPatchMae:
    def test_constant_offset(self):
        assert patch_mae(np.ones((4, 4, 4)), np.zeros((4, 4, 4))) == pytest.approx(1.0)

    def test_perfect_prediction(self):
        truth = np.random.default_rng(1).random((8, 8, 8))
        assert patch_mae(truth, truth) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            patch_mae(np.zeros((4, 4, 4)), np.zeros((4, 4, 5)))


class TestAggregate:
    def test_subject_mean_and_population_std(self):
        report = aggregate(
            [
                PatchResult(record_id="a", patient_id="S01", mae=0.2),
                PatchResult(record_id="b", patient_id="S01", mae=0.4),
            ]
        )
        (subject,) = report.per_subject
        assert subject.mean_mae == pytest.approx(0.3)
        assert subject.std_mae == pytest.approx(0.1)
        assert report.std_convention == "population"

    def test_cohort_summaries(self):
        results = [
            PatchResult(record_id="a", patient_id="S01", mae=1.0),
            PatchResult(record_id="b", patient_id="S02", mae=2.0),
            PatchResult(record_id="c", patient_id="S02", mae=4.0),
        ]
        report = aggregate(results)
        assert report.cohort_patch.mean == pytest.approx(7.0 / 3.0)
        assert report.cohort_subject.mean == pytest.approx((1.0 + 3.0) / 2.0)
        assert report.cohort_subject.std == pytest.approx((0.0 + 1.0) / 2.0)

    def test_subjects_sorted(self):
        report = aggregate(cohort_results())
        assert [s.patient_id for s in report.per_subject] == sorted(s.patient_id for s in report.per_subject)
        assert len(report.per_subject) == 22
        assert all(s.n_patches == 15 for s in report.per_subject)

    def test_empty(self):
        with pytest.raises(EmptySplitError):
            aggregate([])

    def test_expected_subject_without_patches(self, caplog):
        with caplog.at_level("WARNING", logger="regerr.evaluator"):
            report = aggregate(cohort_results(2, 3), expected_subjects=["P00", "P01", "P07"])
        assert [s.patient_id for s in report.per_subject] == ["P00", "P01"]
        assert report.subjects_without_patches == ["P07"]
        assert "P07" in caplog.text

    def test_every_expected_subject_present(self, caplog):
        with caplog.at_level("WARNING", logger="regerr.evaluator"):
            report = aggregate(cohort_results(2, 3), expected_subjects=["P00", "P01"])
        assert report.subjects_without_patches == []
        assert caplog.text == ""


class TestReportOutput:
    def test_json_round_trip(self, tmp_path):
        report = aggregate(cohort_results(3, 2)).model_copy(update={"avg_runtime_s": 0.25})
        assert load_report(emit_report(report, tmp_path / "report.json")) == report

    def test_csv_rows(self, tmp_path):
        emit_report(aggregate(cohort_results()), tmp_path / "report.csv", format="csv")
        with open(tmp_path / "report.csv", newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 23
        assert rows[-1]["patient_id"] == "Mean"
        assert rows[-1]["n_patches"] == str(22 * 15)

    def test_markdown_table(self, tmp_path):
        report = aggregate(cohort_results(3, 2)).model_copy(update={"baseline_mae": 1.5})
        text = emit_report(report, tmp_path / "report.md", format="markdown").read_text(encoding="utf-8")
        assert "| **Mean** |" in text
        for pid in ("P00", "P01", "P02"):
            assert f"| {pid} |" in text
        assert "Mean-predictor baseline" in text
        assert "| n/a |" in text

    def test_markdown_lists_subjects_without_patches(self, tmp_path):
        report = aggregate(cohort_results(2, 2), expected_subjects=["P00", "P01", "P05"])
        text = emit_report(report, tmp_path / "report.md", format="markdown").read_text(encoding="utf-8")
        assert "No patches (left out): P05" in text
        plain = emit_report(aggregate(cohort_results(2, 2)), tmp_path / "plain.md", format="markdown")
        assert "left out" not in plain.read_text(encoding="utf-8")

    def test_empty_report(self, tmp_path):
        report = EvalReport(
            per_patch=[],
            per_subject=[],
            cohort_patch={"mean": 0.0, "std": 0.0},
            cohort_subject={"mean": 0.0, "std": 0.0},
        )
        with pytest.raises(EmptySplitError):
            emit_report(report, tmp_path / "report.json")

    def test_invalid_report_file(self, tmp_path):
        (tmp_path / "report.json").write_text("{}", encoding="utf-8")
        with pytest.raises(FormatError):
            load_report(tmp_path / "report.json")


class TestHistogram:
    def test_writes_png(self, tmp_path):
        rng = np.random.default_rng(0)
        path = save_histogram([rng.random((4, 4, 4))], [rng.random((4, 4, 4))], tmp_path / "hist.png", bins=10)
        assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_nothing_to_plot(self, tmp_path):
        with pytest.raises(EmptySplitError):
            save_histogram([], [], tmp_path / "hist.png")


@pytest.mark.integration
class TestEvaluateDataset:
    def test_ground_truth_predictor_scores_zero(self, small_dataset):
        manifest = load_manifest(small_dataset)
        report = evaluate(ground_truth_predictor, manifest, small_dataset, split="test")
        assert len(report.per_patch) == 8
        assert all(r.mae == 0.0 for r in report.per_patch)
        assert report.cohort_subject.mean == 0.0
        assert report.avg_runtime_s is None
        assert report.baseline_mae is not None and report.baseline_mae > 0.0

    def test_baseline_matches_constant_prediction(self, small_dataset):
        manifest = load_manifest(small_dataset)
        train, test = manifest.records_for("train"), manifest.records_for("test")
        train_patches = [load_entry_record(small_dataset, e).error_patch for e in train]
        train_mean = float(np.mean(np.stack(train_patches), dtype=np.float64))
        assert mean_error(train, small_dataset) == pytest.approx(train_mean, rel=1e-9)
        expected = np.mean(
            [
                patch_mae(np.full(record.error_patch.shape, train_mean), record.error_patch)
                for record in (load_entry_record(small_dataset, e) for e in test)
            ]
        )
        assert mean_predictor_baseline(train, test, small_dataset) == pytest.approx(expected, rel=1e-6)

    def test_subject_without_patches_is_reported(self, small_dataset, caplog):
        manifest = load_manifest(small_dataset)
        assert manifest.split is not None
        (test_pid,) = manifest.split.patients("test")
        (val_pid,) = manifest.split.patients("val")
        assignment = {**manifest.split.assignment, "S99": "test"}
        moved = manifest.model_copy(update={"split": manifest.split.model_copy(update={"assignment": assignment})})
        with caplog.at_level("WARNING", logger="regerr.evaluator"):
            report = evaluate(ground_truth_predictor, moved, small_dataset, split="test")
        assert [s.patient_id for s in report.per_subject] == [test_pid]
        assert report.subjects_without_patches == ["S99"]
        assert "S99" in caplog.text
        assert val_pid not in report.subjects_without_patches

    def test_model_evaluation_with_observer(self, small_dataset):
        manifest = load_manifest(small_dataset)
        seen = []
        report = evaluate(
            build_model(ModelConfig.toy()),
            manifest,
            small_dataset,
            split="val",
            runtime_patches=2,
            baseline=False,
            observer=lambda record, predicted: seen.append((record.record_id, predicted.shape)),
        )
        assert [r.record_id for r in report.per_patch] == [rid for rid, _ in seen]
        assert all(shape == (32, 32, 32) for _, shape in seen)
        assert report.avg_runtime_s is not None and report.avg_runtime_s > 0.0
        assert report.baseline_mae is None
        assert report.environment["deterministic"] in (True, False)

    def test_runtime(self):
        assert measure_runtime(build_model(ModelConfig.toy()), n_patches=2) > 0.0
