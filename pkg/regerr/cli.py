#!/usr/bin/env python3
"""CLI interface for regerr."""

import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple

import click
import numpy as np
from numpy.typing import NDArray
from pydantic import ValidationError

from .config import make_run_config, resolve_options, write_run_config
from .errors import ConfigError, DataError
from .utils import is_deterministic_env, set_deterministic

EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3

CONTEXT_SETTINGS: Dict[str, Any] = {"show_default": True, "help_option_names": ["-h", "--help"]}


@contextmanager
def _exit_codes() -> Iterator[None]:
    """Map library errors onto the documented process exit codes."""
    try:
        yield
    except ConfigError as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    except ValidationError as e:
        click.echo(f"Error: invalid configuration: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    except (DataError, FileNotFoundError, OSError) as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(EXIT_DATA)


def _resolve(ctx: click.Context) -> Dict[str, Any]:
    """Flags merged over the ``--config`` file."""
    return resolve_options(ctx, dict(ctx.params), ctx.params.get("config"))


def _require(options: Dict[str, Any], name: str, flag: Optional[str] = None) -> Any:
    value = options.get(name)
    if value is None or value == ():
        raise ConfigError(f"{flag or '--' + name.replace('_', '-')} is required (flag or config file)")
    return value


def _start(ctx: click.Context, options: Dict[str, Any]) -> Path:
    """Write ``<out>/config.json`` and seed the run; returns the output directory."""
    out = Path(_require(options, "out"))
    write_run_config(make_run_config(ctx.info_name or "regerr", options), out)
    if "seed" in options and is_deterministic_env():
        set_deterministic(int(options["seed"]))
    return out


def _spacing(value: float) -> Optional[float]:
    return value if value > 0 else None


def _deformation_spec(options: Dict[str, Any]) -> Any:
    from .ffd import DeformationSpec

    return DeformationSpec(
        seed=options["seed"],
        max_points_per_axis=options["max_points"],
        max_displacement_mm=options["max_disp_mm"],
    )


def _manifest_with_split(dataset: Path, split_file: Optional[Path]) -> Any:
    from .dataset import with_split
    from .manifest import SplitManifest, load_manifest

    manifest = load_manifest(dataset)
    if split_file is not None:
        if not split_file.exists():
            raise FileNotFoundError(f"Split file not found: {split_file}")
        split = SplitManifest.model_validate_json(split_file.read_text(encoding="utf-8"))
        manifest = with_split(manifest, split)
    return manifest


def _set_threads(jobs: Optional[int]) -> None:
    if jobs is not None and jobs > 0:
        import torch

        torch.set_num_threads(jobs)


config_option = click.option(
    "--config",
    type=click.Path(path_type=Path),
    default=None,
    help="JSON file with option values; flags given on the command line win.",
)
out_option = click.option(
    "-o",
    "--out",
    type=click.Path(path_type=Path),
    default=None,
    help="Output directory (required).",
)
seed_option = click.option("--seed", type=int, default=0, help="Random seed.")
fractions_option = click.option(
    "--fractions",
    type=float,
    nargs=3,
    default=(0.6, 0.2, 0.2),
    help="Train/val/test fractions of patients.",
)


def _simulation_options(f: Any) -> Any:
    f = click.option(
        "--fov-margin-mm",
        type=float,
        default=0.0,
        help="Margin kept around the iUS field of view when cropping.",
    )(f)
    f = click.option(
        "--spacing",
        type=float,
        default=0.5,
        help="Isotropic resampling spacing in mm; 0 keeps the native grid.",
    )(f)
    f = click.option(
        "--max-disp-mm",
        type=float,
        default=10.0,
        help="Maximum control-point displacement per axis in mm (published).",
    )(f)
    f = click.option(
        "--max-points",
        type=int,
        default=20,
        help="Maximum interior control points per axis (published).",
    )(f)
    f = click.option(
        "--n-deformations",
        type=int,
        default=10,
        help="Random misalignments per case (published).",
    )(f)
    return f


@click.group(context_settings=CONTEXT_SETTINGS)
@click.option("-v", "--verbose", is_flag=True, help="Log progress at INFO level.")
def main(verbose: bool) -> None:
    """Simulate MRI/iUS misalignments, train a dense registration-error
    regressor and evaluate it.

    Defaults marked (published) are the settings of the published model.
    """
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s: %(message)s",
    )


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


@main.command("make-synthetic", context_settings=CONTEXT_SETTINGS)
@out_option
@click.option("--subjects", type=int, default=8, help="Number of synthetic subjects.")
@click.option("--size", type=int, default=96, help="Volume edge length in voxels.")
@click.option("--landmarks", type=int, default=15, help="Landmarks per subject.")
@click.option("--spacing", type=float, default=1.0, help="Voxel spacing in mm.")
@seed_option
@config_option
@click.pass_context
def make_synthetic(ctx: click.Context, **_: Any) -> None:
    """Write a procedural cohort of co-registered MRI/iUS cases."""
    from .synthetic import write_synthetic_cohort

    with _exit_codes():
        o = _resolve(ctx)
        out = _start(ctx, o)
        paths = write_synthetic_cohort(
            out,
            n_subjects=o["subjects"],
            size=o["size"],
            n_landmarks=o["landmarks"],
            seed=o["seed"],
            spacing=o["spacing"],
        )
        click.echo(f"Wrote {len(paths)} synthetic cases to {out}")


@main.command(context_settings=CONTEXT_SETTINGS)
@click.option("--case", "case", type=click.Path(path_type=Path), default=None, help="Case descriptor JSON.")
@seed_option
@_simulation_options
@out_option
@config_option
@click.pass_context
def simulate(ctx: click.Context, **_: Any) -> None:
    """Apply random B-spline misalignments to one case.

    Writes the prepared MRI and iUS, then per deformation the warped iUS,
    its error map and its control grid, plus ``deformations.json``.
    """
    from .dataset import load_case_descriptor, prepare_case, simulate_case
    from .ffd import save_grid
    from .volume import save_volume

    with _exit_codes():
        o = _resolve(ctx)
        case_path = Path(_require(o, "case"))
        spec = _deformation_spec(o)
        out = _start(ctx, o)

        descriptor = load_case_descriptor(case_path)
        mri, ius, landmarks = prepare_case(
            descriptor, target_spacing_mm=_spacing(o["spacing"]), fov_margin_mm=o["fov_margin_mm"]
        )
        save_volume(mri, out / "mri")
        save_volume(ius, out / "ius")
        deformations = simulate_case(
            mri, ius, landmarks, spec, o["n_deformations"], patient_id=descriptor.patient_id
        )
        stats: List[Dict[str, Any]] = []
        for d in deformations:
            folder = out / f"deformation_{d.index:02d}"
            save_volume(d.warped_ius, folder / "warped_ius")
            save_volume(d.error, folder / "error")
            save_grid(d.grid, folder / "grid.json")
            stats.append(d.stats(descriptor.patient_id, fov=ius).model_dump())
        (out / "deformations.json").write_text(json.dumps(stats, indent=2) + "\n", encoding="utf-8")
        click.echo(f"Simulated {len(deformations)} deformations of {descriptor.patient_id} into {out}")


@main.command("build-dataset", context_settings=CONTEXT_SETTINGS)
@click.option(
    "--case",
    "cases",
    type=click.Path(path_type=Path),
    multiple=True,
    help="Case descriptor JSON (repeatable).",
)
@click.option(
    "--cases-dir",
    type=click.Path(path_type=Path),
    default=None,
    help="Directory whose */case.json descriptors are all used.",
)
@click.option("--patch-size", type=int, default=64, help="Patch edge length in voxels (published).")
@seed_option
@_simulation_options
@click.option("--ridge", type=float, default=1e-6, help="Ridge weight of the landmark B-spline fit.")
@fractions_option
@click.option("--jobs", type=int, default=1, help="Cases processed in parallel.")
@out_option
@config_option
@click.pass_context
def build_dataset(ctx: click.Context, **_: Any) -> None:
    """Simulate every case and write landmark-centred patch records plus manifest.json."""
    from .dataset import build_dataset as build, load_case_descriptor

    with _exit_codes():
        o = _resolve(ctx)
        paths = [Path(p) for p in o["cases"]]
        if o["cases_dir"] is not None:
            cases_dir = Path(o["cases_dir"])
            if not cases_dir.is_dir():
                raise FileNotFoundError(f"Cases directory not found: {cases_dir}")
            paths.extend(sorted(cases_dir.glob("*/case.json")))
        if not paths:
            raise ConfigError("No cases given; use --case or --cases-dir")
        spec = _deformation_spec(o)
        out = _start(ctx, o)

        manifest = build(
            [load_case_descriptor(p) for p in paths],
            spec,
            o["patch_size"],
            out,
            n_deformations=o["n_deformations"],
            target_spacing_mm=_spacing(o["spacing"]),
            fov_margin_mm=o["fov_margin_mm"],
            ridge=o["ridge"],
            fractions=o["fractions"],
            jobs=o["jobs"],
        )
        click.echo(
            f"Wrote {len(manifest.records)} patches from {len(manifest.patient_ids())} cases to {out}"
        )
        if manifest.split is not None:
            click.echo(_format_counts(manifest.split.counts()))


def _format_counts(counts: Dict[str, int]) -> str:
    return ", ".join(f"{name} {n}" for name, n in counts.items())


@main.command(context_settings=CONTEXT_SETTINGS)
@click.option(
    "--dataset",
    type=click.Path(path_type=Path),
    default=None,
    help="Dataset directory whose patients are split.",
)
@click.option(
    "--patients",
    type=int,
    default=None,
    help="Split N anonymous patients P01..PNN instead of a dataset.",
)
@fractions_option
@seed_option
@out_option
@config_option
@click.pass_context
def split(ctx: click.Context, **_: Any) -> None:
    """Subject-wise train/val/test split, written to split.json."""
    from .dataset import make_split
    from .manifest import load_manifest

    with _exit_codes():
        o = _resolve(ctx)
        if (o["dataset"] is None) == (o["patients"] is None):
            raise ConfigError("Give exactly one of --dataset or --patients")
        out = _start(ctx, o)
        if o["dataset"] is not None:
            patients = load_manifest(Path(o["dataset"])).patient_ids()
        else:
            patients = [f"P{i + 1:02d}" for i in range(o["patients"])]
        result = make_split(patients, o["fractions"], seed=o["seed"])
        (out / "split.json").write_text(result.model_dump_json(indent=2) + "\n", encoding="utf-8")
        click.echo(_format_counts(result.counts()))


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@main.command(context_settings=CONTEXT_SETTINGS)
@click.option("--dataset", type=click.Path(path_type=Path), default=None, help="Dataset directory.")
@click.option(
    "--split-file",
    type=click.Path(path_type=Path),
    default=None,
    help="split.json overriding the manifest's split.",
)
@click.option("--batch-size", type=int, default=8, help="Patches per step (published).")
@click.option("--epochs", type=int, default=200, help="Training epochs (published).")
@click.option("--lr", type=float, default=1e-4, help="AdamW learning rate (published).")
@click.option("--lambda-smooth", type=float, default=0.01, help="Smoothness weight (published).")
@click.option(
    "--smooth-norm",
    type=click.Choice(["l2", "l1"]),
    default="l2",
    help="Norm of the error-map gradient penalty.",
)
@click.option("--weight-decay", type=float, default=0.01, help="AdamW weight decay.")
@seed_option
@click.option("--init-seed", type=int, default=0, help="Seed of the weight initialisation.")
@click.option("--device", type=str, default="cpu", help="Torch device, or 'auto'.")
@click.option("--deterministic", is_flag=True, help="Restrict torch to deterministic kernels.")
@click.option("--max-steps", type=int, default=None, help="Stop after this many optimizer steps.")
@click.option("--resume", type=click.Path(path_type=Path), default=None, help="last.ckpt to resume from.")
@click.option(
    "--pretrained",
    type=click.Path(path_type=Path),
    default=None,
    help="Self-supervised Swin checkpoint for the transformer encoder.",
)
@click.option("--toy", is_flag=True, help="Use the small CPU architecture.")
@out_option
@config_option
@click.pass_context
def train(ctx: click.Context, **_: Any) -> None:
    """Train the error regressor; writes best.ckpt, last.ckpt and history.csv."""
    from .network import ModelConfig, build_model, load_pretrained
    from .trainer import TrainConfig, model_config_for, train_from_manifest

    with _exit_codes():
        o = _resolve(ctx)
        out = _start(ctx, o)
        manifest = _manifest_with_split(Path(_require(o, "dataset")), o["split_file"])
        tcfg = TrainConfig(
            batch_size=o["batch_size"],
            epochs=o["epochs"],
            learning_rate=o["lr"],
            lambda_smooth=o["lambda_smooth"],
            smooth_norm=o["smooth_norm"],
            weight_decay=o["weight_decay"],
            patch_size=manifest.patch_size,
            seed=o["seed"],
            init_seed=o["init_seed"],
            device=o["device"],
            deterministic=o["deterministic"],
            checkpoint_dir=out,
            max_steps=o["max_steps"],
            resume_from=o["resume"],
        )
        cfg = model_config_for(tcfg, ModelConfig.toy() if o["toy"] else ModelConfig())
        model = build_model(cfg, init_seed=tcfg.init_seed)
        if o["pretrained"] is not None:
            load_pretrained(model, o["pretrained"])
        run = make_run_config(ctx.info_name or "train", o).model_dump()
        _, history = train_from_manifest(model, manifest, Path(o["dataset"]), tcfg, out, {"run": run})
        if history:
            best = min(history, key=lambda r: r.val_mae)
            click.echo(f"Best validation MAE {best.val_mae:.4f} mm at epoch {best.epoch}; saved {out / 'best.ckpt'}")
        else:
            click.echo(f"No epochs run; checkpoints in {out}")


@main.command(context_settings=CONTEXT_SETTINGS)
@click.option("--checkpoint", type=click.Path(path_type=Path), default=None, help="best.ckpt from train.")
@click.option("--mri", type=click.Path(path_type=Path), default=None, help="MRI patch or volume.")
@click.option("--ius", type=click.Path(path_type=Path), default=None, help="iUS patch or volume.")
@click.option(
    "--landmarks",
    type=click.Path(path_type=Path),
    default=None,
    help="Landmark CSV; predicts one patch per landmark of whole volumes.",
)
@click.option("--device", type=str, default="cpu", help="Torch device.")
@out_option
@config_option
@click.pass_context
def predict(ctx: click.Context, **_: Any) -> None:
    """Predict dense error maps (mm) and write them as raw_json volumes."""
    from .dataset import check_patch_size, landmark_windows, normalize_patch
    from .network import load_parameters, predict as run_model
    from .volume import Modality, Volume, load_landmarks, load_volume, resample_to_geometry, save_volume

    with _exit_codes():
        o = _resolve(ctx)
        checkpoint = Path(_require(o, "checkpoint"))
        mri_path = Path(_require(o, "mri"))
        ius_path = Path(_require(o, "ius"))
        out = _start(ctx, o)

        model = load_parameters(checkpoint)
        p = model.cfg.patch_size
        check_patch_size(p)
        mri = load_volume(mri_path)
        ius = load_volume(ius_path)
        if not ius.same_geometry(mri):
            ius = resample_to_geometry(ius, mri)

        def write(name: str, mri_patch: NDArray[Any], ius_patch: NDArray[Any], origin: Tuple[float, float, float]) -> None:
            error = run_model(model, normalize_patch(mri_patch), normalize_patch(ius_patch), device=o["device"])
            save_volume(Volume(data=error, spacing=mri.spacing, origin=origin, modality=Modality.ERROR), out / name)

        if o["landmarks"] is None:
            if mri.shape != (p, p, p):
                raise DataError(f"Input patch shape {mri.shape} != model patch size {p}^3; pass --landmarks for volumes")
            write("error", mri.data, ius.data, mri.origin)
            click.echo(f"Wrote {out / 'error.json'}")
            return

        count = 0
        for landmark, start in landmark_windows(mri, load_landmarks(Path(o["landmarks"])), p):
            window = tuple(slice(s, s + p) for s in start)
            origin = tuple(float(v) for v in mri.voxel_to_world(np.asarray(start)))
            write(f"{landmark.id}_error", mri.data[window], ius.data[window], origin)  # type: ignore[arg-type]
            count += 1
        if count == 0:
            raise DataError("No landmark yields a full patch inside the volumes")
        click.echo(f"Wrote {count} error maps to {out}")


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@main.command(context_settings=CONTEXT_SETTINGS)
@click.option("--checkpoint", type=click.Path(path_type=Path), default=None, help="best.ckpt from train.")
@click.option(
    "--ground-truth",
    is_flag=True,
    help="Score the ground truth against itself (reference run, no model).",
)
@click.option("--dataset", type=click.Path(path_type=Path), default=None, help="Dataset directory.")
@click.option("--split-file", type=click.Path(path_type=Path), default=None, help="split.json override.")
@click.option(
    "--split",
    "split_name",
    type=click.Choice(["train", "val", "test"]),
    default="test",
    help="Split to evaluate.",
)
@click.option("--device", type=str, default="cpu", help="Torch device.")
@click.option("--runtime-patches", type=int, default=10, help="Timed single-patch predictions.")
@click.option("--baseline/--no-baseline", default=True, help="Also score the training-mean predictor.")
@click.option("--bins", type=int, default=50, help="Histogram bins.")
@click.option("--jobs", type=int, default=None, help="Torch CPU threads.")
@out_option
@config_option
@click.pass_context
def evaluate(ctx: click.Context, **_: Any) -> None:
    """Patch MAE and runtime on one split.

    Writes report.json, report.md, report.csv and error_histogram.png.
    """
    from .evaluator import emit_report, evaluate as run_evaluation, ground_truth_predictor, save_histogram
    from .network import load_parameters

    with _exit_codes():
        o = _resolve(ctx)
        if (o["checkpoint"] is None) == (not o["ground_truth"]):
            raise ConfigError("Give exactly one of --checkpoint or --ground-truth")
        dataset = Path(_require(o, "dataset"))
        out = _start(ctx, o)
        _set_threads(o["jobs"])

        manifest = _manifest_with_split(dataset, o["split_file"])
        predictor: Any = ground_truth_predictor
        if o["checkpoint"] is not None:
            predictor = load_parameters(Path(o["checkpoint"]))

        predictions: List[NDArray[Any]] = []
        truths: List[NDArray[Any]] = []

        def collect(record: Any, predicted: NDArray[Any]) -> None:
            predictions.append(predicted)
            truths.append(record.error_patch)

        report = run_evaluation(
            predictor,
            manifest,
            dataset,
            split=o["split_name"],
            device=o["device"],
            runtime_patches=o["runtime_patches"],
            baseline=o["baseline"],
            observer=collect,
        )
        if o["checkpoint"] is not None:
            report = report.model_copy(update={"checkpoint": str(o["checkpoint"])})
        emit_report(report, out / "report.json", "json")
        emit_report(report, out / "report.md", "markdown")
        emit_report(report, out / "report.csv", "csv")
        save_histogram(predictions, truths, out / "error_histogram.png", bins=o["bins"])
        click.echo(
            f"{o['split_name']} MAE {report.cohort_patch.mean:.3f} ± {report.cohort_patch.std:.3f} mm "
            f"over {len(report.per_patch)} patches; report in {out}"
        )


_FORMAT_SUFFIX = {"json": "json", "markdown": "md", "csv": "csv"}


@main.command(context_settings=CONTEXT_SETTINGS)
@click.option("--report", "report_path", type=click.Path(path_type=Path), default=None, help="report.json from evaluate.")
@click.option(
    "--format",
    "formats",
    type=click.Choice(["markdown", "csv", "json"]),
    multiple=True,
    default=("markdown", "csv"),
    help="Output format (repeatable).",
)
@out_option
@config_option
@click.pass_context
def report(ctx: click.Context, **_: Any) -> None:
    """Re-render a saved evaluation report."""
    from .evaluator import emit_report, load_report

    with _exit_codes():
        o = _resolve(ctx)
        source = Path(_require(o, "report_path", "--report"))
        out = _start(ctx, o)
        loaded = load_report(source)
        for fmt in o["formats"]:
            path = emit_report(loaded, out / f"report.{_FORMAT_SUFFIX[fmt]}", fmt)
            click.echo(f"Wrote {path}")


@main.command(context_settings=CONTEXT_SETTINGS)
def selfcheck() -> None:
    """Run the embedded property checks; exit 1 if any fails."""
    from .selfcheck import run_selfcheck

    results = run_selfcheck()
    for result in results:
        click.echo(result.line())
    if not all(r.passed for r in results):
        sys.exit(EXIT_CHECK_FAILED)


if __name__ == "__main__":
    main()
