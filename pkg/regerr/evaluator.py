"""MAE and runtime evaluation with case-by-case and cohort reports."""

import csv
import json
import logging
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence, Union

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ValidationError

from .dataset import PatchRecord, load_entry_record
from .errors import EmptySplitError, FormatError, ShapeError
from .manifest import DatasetManifest, PatchEntry, SplitName, get_library_version
from .utils import describe_environment, is_deterministic_env

logger = logging.getLogger(__name__)

ReportFormat = Literal["json", "csv", "markdown"]
Predictor = Callable[[PatchRecord], NDArray[np.float32]]
# Called with each record and its prediction, e.g. to collect histogram data
Observer = Callable[[PatchRecord, NDArray[np.float32]], None]


class PatchResult(BaseModel):
    record_id: str
    patient_id: str
    mae: float


class SubjectResult(BaseModel):
    patient_id: str
    mean_mae: float
    std_mae: float
    n_patches: int


class Summary(BaseModel):
    mean: float
    std: float


class EvalReport(BaseModel):
    """Case-by-case and cohort MAE (mm); standard deviations divide by N."""

    split: str = "test"
    per_patch: List[PatchResult]
    per_subject: List[SubjectResult]
    cohort_patch: Summary
    cohort_subject: Summary
    avg_runtime_s: Optional[float] = None
    baseline_mae: Optional[float] = None
    subjects_without_patches: List[str] = []
    std_convention: str = "population"
    environment: Dict[str, Any] = {}
    library_version: str = "unknown"
    checkpoint: Optional[str] = None


def patch_mae(predicted: NDArray[Any], truth: NDArray[Any]) -> float:
    """Mean absolute difference over voxels, in mm."""
    phi = np.asarray(predicted, dtype=np.float64)
    f = np.asarray(truth, dtype=np.float64)
    if phi.shape != f.shape:
        raise ShapeError(f"prediction shape {phi.shape} != ground truth shape {f.shape}")
    return float(np.mean(np.abs(phi - f)))


def _mean_std(values: Sequence[float]) -> Summary:
    arr = np.asarray(values, dtype=np.float64)
    return Summary(mean=float(arr.mean()), std=float(arr.std()))


def aggregate(
    per_patch: Sequence[PatchResult], split: str = "test", expected_subjects: Sequence[str] = ()
) -> EvalReport:
    """Subject rows (mean ± std of patch MAEs) and both cohort summaries.

    Subjects in ``expected_subjects`` without any patch get no row; they are
    logged and listed in ``subjects_without_patches``.

    ``cohort_patch`` pools all patches; ``cohort_subject`` is the unweighted
    mean of subject means and of subject stds.
    """
    if not per_patch:
        raise EmptySplitError(f"No patches to aggregate for split {split!r}")
    by_subject: Dict[str, List[float]] = {}
    for result in per_patch:
        by_subject.setdefault(result.patient_id, []).append(result.mae)
    subjects: List[SubjectResult] = []
    for pid in sorted(by_subject):
        s = _mean_std(by_subject[pid])
        subjects.append(
            SubjectResult(patient_id=pid, mean_mae=s.mean, std_mae=s.std, n_patches=len(by_subject[pid]))
        )
    missing = sorted(set(expected_subjects) - set(by_subject))
    if missing:
        logger.warning(
            "%d subject(s) of split %r have no patches and are left out: %s", len(missing), split, ", ".join(missing)
        )
    return EvalReport(
        split=split,
        per_patch=list(per_patch),
        per_subject=subjects,
        subjects_without_patches=missing,
        cohort_patch=_mean_std([r.mae for r in per_patch]),
        cohort_subject=Summary(
            mean=float(np.mean([s.mean_mae for s in subjects])),
            std=float(np.mean([s.std_mae for s in subjects])),
        ),
    )


def model_predictor(model: Any, device: str = "cpu") -> Predictor:
    """Wrap a network so it predicts one record at a time (batch size 1)."""
    from .network import predict

    def run(record: PatchRecord) -> NDArray[np.float32]:
        return predict(model, record.mri_patch, record.ius_patch, device=device)

    return run


def ground_truth_predictor(record: PatchRecord) -> NDArray[np.float32]:
    return record.error_patch


def predict_entries(
    predictor: Predictor,
    entries: Sequence[PatchEntry],
    dataset_dir: Union[str, Path],
    observer: Optional[Observer] = None,
) -> List[PatchResult]:
    results: List[PatchResult] = []
    for entry in entries:
        record = load_entry_record(dataset_dir, entry)
        predicted = predictor(record)
        if observer is not None:
            observer(record, predicted)
        results.append(
            PatchResult(
                record_id=entry.record_id,
                patient_id=entry.patient_id,
                mae=patch_mae(predicted, record.error_patch),
            )
        )
    return results


def mean_error(entries: Sequence[PatchEntry], dataset_dir: Union[str, Path]) -> float:
    """Voxel-wise mean ground-truth error over a set of patches."""
    if not entries:
        raise EmptySplitError("Cannot compute a mean error over zero patches")
    total = 0.0
    count = 0
    for entry in entries:
        patch = load_entry_record(dataset_dir, entry).error_patch
        total += float(np.sum(patch, dtype=np.float64))
        count += patch.size
    return total / count


def mean_predictor_baseline(
    train: Sequence[PatchEntry], test: Sequence[PatchEntry], dataset_dir: Union[str, Path]
) -> float:
    """Cohort patch MAE of predicting the training-set mean error everywhere."""
    constant = mean_error(train, dataset_dir)

    def predict_constant(record: PatchRecord) -> NDArray[np.float32]:
        return np.full(record.error_patch.shape, constant, dtype=np.float64)  # type: ignore[return-value]

    results = predict_entries(predict_constant, test, dataset_dir)
    if not results:
        raise EmptySplitError("Baseline needs at least one test patch")
    return float(np.mean([r.mae for r in results]))


def measure_runtime(
    model: Any,
    n_patches: int = 10,
    warmup: int = 1,
    device: str = "cpu",
    seed: int = 0,
) -> float:
    """Mean wall-clock seconds of single-patch forward passes after warm-up."""
    from .network import predict

    if n_patches < 1:
        raise ValueError(f"n_patches must be >= 1, got {n_patches}")
    p = model.cfg.patch_size
    rng = np.random.default_rng(seed)
    mri = rng.random((p, p, p), dtype=np.float32)
    ius = rng.random((p, p, p), dtype=np.float32)
    for _ in range(warmup):
        predict(model, mri, ius, device=device)
    durations: List[float] = []
    for _ in range(n_patches):
        t0 = time.perf_counter()
        predict(model, mri, ius, device=device)
        durations.append(time.perf_counter() - t0)
    return float(np.mean(durations))


def evaluate(
    predictor: Union[Predictor, Any],
    manifest: DatasetManifest,
    dataset_dir: Union[str, Path],
    split: SplitName = "test",
    device: str = "cpu",
    runtime_patches: int = 10,
    baseline: bool = True,
    observer: Optional[Observer] = None,
) -> EvalReport:
    """Evaluate a model (or any record -> prediction callable) on one split."""
    from .network import ErrorNet

    entries = manifest.records_for(split)
    if not entries:
        raise EmptySplitError(f"Split {split!r} has no patches")
    model = predictor if isinstance(predictor, ErrorNet) else None
    run = model_predictor(model, device) if model is not None else predictor

    expected = manifest.split.patients(split) if manifest.split is not None else ()
    report = aggregate(predict_entries(run, entries, dataset_dir, observer), split, expected)
    updates: Dict[str, Any] = {
        "environment": describe_environment(is_deterministic_env()),
        "library_version": get_library_version(),
    }
    if model is not None and runtime_patches > 0:
        updates["avg_runtime_s"] = measure_runtime(model, runtime_patches, device=device)
    if baseline and split != "train":
        train_entries = manifest.records_for("train") if manifest.split is not None else []
        if train_entries:
            updates["baseline_mae"] = mean_predictor_baseline(train_entries, entries, dataset_dir)
    return report.model_copy(update=updates)


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def _render_markdown(report: EvalReport) -> str:
    from jinja2 import Environment, FileSystemLoader

    templates_dir = Path(__file__).parent / "templates"
    env = Environment(loader=FileSystemLoader(str(templates_dir)), keep_trailing_newline=True)
    env.filters["mm"] = lambda v: f"{v:.2f}"
    return env.get_template("report.md.j2").render(report=report)


def _write_csv(report: EvalReport, path: Path) -> None:
    fieldnames = ["patient_id", "n_patches", "mean_mae_mm", "std_mae_mm"]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for subject in report.per_subject:
            writer.writerow(
                {
                    "patient_id": subject.patient_id,
                    "n_patches": subject.n_patches,
                    "mean_mae_mm": subject.mean_mae,
                    "std_mae_mm": subject.std_mae,
                }
            )
        writer.writerow(
            {
                "patient_id": "Mean",
                "n_patches": len(report.per_patch),
                "mean_mae_mm": report.cohort_subject.mean,
                "std_mae_mm": report.cohort_subject.std,
            }
        )


def emit_report(report: EvalReport, out_path: Union[str, Path], format: ReportFormat = "json") -> Path:
    """Write the report as JSON (lossless), CSV (subject rows) or markdown."""
    if not report.per_subject:
        raise EmptySplitError("Report has no subject rows")
    path = Path(out_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if format == "json":
        path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    elif format == "csv":
        _write_csv(report, path)
    elif format == "markdown":
        path.write_text(_render_markdown(report), encoding="utf-8")
    else:
        raise ValueError(f"Unknown report format: {format}")
    return path


def load_report(path: Union[str, Path]) -> EvalReport:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Report not found: {path}")
    try:
        return EvalReport.model_validate(json.loads(path.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, ValidationError) as e:
        raise FormatError(f"Invalid report {path}: {e}") from e


def save_histogram(
    predictions: Sequence[NDArray[Any]],
    truths: Sequence[NDArray[Any]],
    path: Union[str, Path],
    bins: int = 50,
) -> Path:
    """PNG with overlaid histograms of predicted and true voxel errors."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pred = np.concatenate([np.ravel(p) for p in predictions]) if predictions else np.zeros(0)
    true = np.concatenate([np.ravel(t) for t in truths]) if truths else np.zeros(0)
    if pred.size == 0 or true.size == 0:
        raise EmptySplitError("Histogram needs at least one prediction and one ground truth")
    hi = float(max(pred.max(), true.max(), 1e-6))
    edges = np.linspace(0.0, hi, bins + 1)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(true, bins=edges, alpha=0.6, label="ground truth", density=True)
    ax.hist(pred, bins=edges, alpha=0.6, label="predicted", density=True)
    ax.set_xlabel("registration error (mm)")
    ax.set_ylabel("density")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
