"""Training loop: MSE + lambda * smoothness, AdamW, best-validation selection.

A run directory holds ``config.json``, ``history.csv``, ``best.ckpt``
(parameters + sidecar, loadable with ``network.load_parameters``) and
``last.ckpt`` (full training state for resuming).
"""

import copy
import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, Field, ValidationError

from .dataset import PatchRecord, load_entry_record
from .errors import ConfigError, EmptySplitError, NonFiniteLossError, ShapeError, VersionMismatchError
from .evaluator import mean_predictor_baseline, model_predictor, patch_mae
from .manifest import DatasetManifest, PatchEntry, get_library_version, is_format_compatible
from .network import ErrorNet, ModelConfig, save_parameters
from .timings import log_timing, report_timing_statistics, timing_stat
from .utils import describe_environment, is_deterministic_env, set_deterministic

logger = logging.getLogger(__name__)

TRAIN_STATE_FORMAT_VERSION = "1.0"
HISTORY_FIELDS = ["epoch", "train_total", "train_sim", "train_smooth", "val_mae"]

__all__ = [
    "TrainConfig",
    "TrainState",
    "EpochRecord",
    "Trainer",
    "ManifestRecords",
    "loss_terms",
    "smoothness",
    "make_optimizer",
    "records_mae",
    "train",
    "train_from_manifest",
    "checkpoint_save",
    "checkpoint_resume",
    "mean_predictor_baseline",
]


class TrainConfig(BaseModel):
    """Training hyperparameters; defaults are the published settings."""

    batch_size: int = Field(8, ge=1)
    epochs: int = Field(200, ge=1)
    optimizer: Literal["AdamW"] = "AdamW"
    learning_rate: float = Field(1e-4, gt=0)
    lambda_smooth: float = Field(0.01, ge=0)
    smooth_norm: Literal["l2", "l1"] = "l2"
    weight_decay: float = Field(0.01, ge=0)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    patch_size: int = 64
    seed: int = 0
    init_seed: int = 0
    device: str = "cpu"
    deterministic: bool = False
    checkpoint_dir: Optional[Path] = None
    max_steps: Optional[int] = Field(None, ge=1)
    resume_from: Optional[Path] = None


class EpochRecord(BaseModel):
    epoch: int
    train_total: float
    train_sim: float
    train_smooth: float
    val_mae: float


class TrainState(BaseModel):
    epoch: int = 0
    step: int = 0
    best_val_mae: float = float("inf")
    best_epoch: int = 0
    history: List[EpochRecord] = []


class RecordSource(Protocol):
    def __len__(self) -> int: ...

    def __getitem__(self, index: int) -> PatchRecord: ...


class ManifestRecords:
    """Lazily loaded patch records of a manifest split."""

    def __init__(self, entries: Sequence[PatchEntry], dataset_dir: Union[str, Path]):
        self.entries = list(entries)
        self.dataset_dir = Path(dataset_dir)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, index: int) -> PatchRecord:
        return load_entry_record(self.dataset_dir, self.entries[index])


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def smoothness(phi: torch.Tensor, norm: Literal["l2", "l1"] = "l2") -> torch.Tensor:
    """Forward-difference gradient penalty over the last three axes.

    Differences are in voxel units; the missing difference at the far
    boundary counts as 0, and the sum is divided by the voxel count.
    """
    diffs = (
        phi[..., 1:, :, :] - phi[..., :-1, :, :],
        phi[..., :, 1:, :] - phi[..., :, :-1, :],
        phi[..., :, :, 1:] - phi[..., :, :, :-1],
    )
    if norm == "l1":
        total = sum(d.abs().sum() for d in diffs)
    else:
        total = sum((d * d).sum() for d in diffs)
    return total / phi.numel()  # type: ignore[return-value]


def loss_terms(
    predicted: torch.Tensor,
    truth: torch.Tensor,
    lambda_smooth: float,
    norm: Literal["l2", "l1"] = "l2",
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(total, sim, smooth) with sim = MSE and total = sim + lambda * smooth."""
    if predicted.shape != truth.shape:
        raise ShapeError(f"prediction shape {tuple(predicted.shape)} != truth shape {tuple(truth.shape)}")
    if predicted.dim() < 3:
        raise ShapeError(f"loss needs at least 3 spatial axes, got {tuple(predicted.shape)}")
    if lambda_smooth < 0:
        raise ConfigError(f"lambda_smooth must be >= 0, got {lambda_smooth}")
    diff = predicted - truth
    sim = (diff * diff).mean()
    smooth = smoothness(predicted, norm)
    return sim + lambda_smooth * smooth, sim, smooth


def make_optimizer(model: torch.nn.Module, tcfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        model.parameters(),
        lr=tcfg.learning_rate,
        betas=tcfg.betas,
        eps=tcfg.eps,
        weight_decay=tcfg.weight_decay,
    )


def records_mae(model: ErrorNet, records: RecordSource, device: str = "cpu") -> float:
    """Mean patch MAE with single-patch prediction, as the evaluator computes it."""
    if len(records) == 0:
        raise EmptySplitError("Cannot compute MAE over zero patches")
    run = model_predictor(model, device)
    maes: List[float] = []
    for i in range(len(records)):
        record = records[i]
        maes.append(patch_mae(run(record), record.error_patch))
    return float(np.mean(maes))


def resolve_device(hint: str) -> torch.device:
    if hint == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(hint)


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------


class Trainer:
    def __init__(
        self,
        model: ErrorNet,
        tcfg: TrainConfig,
        run_dir: Optional[Union[str, Path]] = None,
        extra_config: Optional[Dict[str, Any]] = None,
    ):
        self.tcfg = tcfg
        self.deterministic = tcfg.deterministic or is_deterministic_env()
        if self.deterministic:
            set_deterministic(tcfg.seed)
        self.device = resolve_device(tcfg.device)
        self.model = model.to(self.device)
        self.optimizer = make_optimizer(self.model, tcfg)
        self.state = TrainState()
        self.best_state_dict = copy.deepcopy(self.model.state_dict())
        self.run_dir = Path(run_dir) if run_dir is not None else tcfg.checkpoint_dir
        self.extra_config = extra_config or {}

    # -- batching ---------------------------------------------------------

    def _batch_tensors(self, records: List[PatchRecord]) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        dtype = next(self.model.parameters()).dtype

        def stack(name: str) -> torch.Tensor:
            arr = np.stack([getattr(r, name) for r in records])[:, None]
            return torch.from_numpy(arr).to(device=self.device, dtype=dtype)

        return stack("mri_patch"), stack("ius_patch"), stack("error_patch")

    def train_step(self, records: List[PatchRecord], label: str = "") -> Tuple[float, float, float]:
        self.model.train()
        mri, ius, truth = self._batch_tensors(records)
        predicted = self.model(mri, ius)
        total, sim, smooth = loss_terms(predicted, truth, self.tcfg.lambda_smooth, self.tcfg.smooth_norm)
        if not torch.isfinite(total):
            ids = ", ".join(r.record_id for r in records)
            raise NonFiniteLossError(f"Non-finite loss {total.item()} at {label} (records: {ids})")
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()  # type: ignore[no-untyped-call]
        self.optimizer.step()
        self.state.step += 1
        return float(total.item()), float(sim.item()), float(smooth.item())

    def _steps_exhausted(self) -> bool:
        return self.tcfg.max_steps is not None and self.state.step >= self.tcfg.max_steps

    def train_epoch(self, records: RecordSource, epoch: int) -> Tuple[float, float, float]:
        """One pass in an order fixed by (seed, epoch); returns mean loss terms."""
        order = np.random.default_rng([self.tcfg.seed, epoch]).permutation(len(records))
        bs = self.tcfg.batch_size
        sums = np.zeros(3)
        seen = 0
        for b, start in enumerate(range(0, len(order), bs)):
            if self._steps_exhausted():
                break
            batch = [records[int(i)] for i in order[start : start + bs]]
            with timing_stat("train step", f"epoch {epoch + 1} batch {b}"):
                terms = self.train_step(batch, label=f"epoch {epoch + 1} batch {b}")
            sums += np.asarray(terms) * len(batch)
            seen += len(batch)
        if seen == 0:
            return (float("nan"),) * 3  # type: ignore[return-value]
        t, s, m = sums / seen
        return float(t), float(s), float(m)

    # -- run ----------------------------------------------------------------

    def fit(self, train_records: RecordSource, val_records: RecordSource) -> Tuple[ErrorNet, List[EpochRecord]]:
        """Train to ``epochs`` (or ``max_steps``); returns the best-validation model."""
        if len(train_records) == 0:
            raise EmptySplitError("Training split is empty")
        if len(val_records) == 0:
            raise EmptySplitError("Validation split is empty")
        if self.run_dir is not None:
            self._write_config(len(train_records), len(val_records))

        while self.state.epoch < self.tcfg.epochs and not self._steps_exhausted():
            epoch = self.state.epoch
            with log_timing(f"Epoch {epoch + 1}"):
                total, sim, smooth = self.train_epoch(train_records, epoch)
                val_mae = records_mae(self.model, val_records, str(self.device))
            record = EpochRecord(
                epoch=epoch + 1, train_total=total, train_sim=sim, train_smooth=smooth, val_mae=val_mae
            )
            self.state.history.append(record)
            self.state.epoch = epoch + 1
            logger.info(
                "epoch %d: loss %.5f (sim %.5f, smooth %.5f) val MAE %.4f mm",
                record.epoch, total, sim, smooth, val_mae,
            )
            if val_mae < self.state.best_val_mae:
                self.state.best_val_mae = val_mae
                self.state.best_epoch = record.epoch
                self.best_state_dict = copy.deepcopy(self.model.state_dict())
                if self.run_dir is not None:
                    save_parameters(self._best_model(), self.run_dir / "best.ckpt")
            if self.run_dir is not None:
                self._write_history()
                self.save_checkpoint(self.run_dir / "last.ckpt")

        report_timing_statistics()
        return self._best_model(), list(self.state.history)

    def _best_model(self) -> ErrorNet:
        best = copy.deepcopy(self.model)
        best.load_state_dict(self.best_state_dict)
        return best

    def _write_config(self, n_train: int, n_val: int) -> None:
        assert self.run_dir is not None
        self.run_dir.mkdir(parents=True, exist_ok=True)
        config = {
            **self.extra_config,
            "model": self.model.cfg.model_dump(mode="json"),
            "train": self.tcfg.model_dump(mode="json"),
            "n_train_patches": n_train,
            "n_val_patches": n_val,
            "environment": describe_environment(self.deterministic),
            "library_version": get_library_version(),
        }
        (self.run_dir / "config.json").write_text(json.dumps(config, indent=2) + "\n", encoding="utf-8")

    def _write_history(self) -> None:
        assert self.run_dir is not None
        with open(self.run_dir / "history.csv", "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=HISTORY_FIELDS)
            writer.writeheader()
            for record in self.state.history:
                writer.writerow(record.model_dump())

    # -- checkpoints ----------------------------------------------------------

    def save_checkpoint(self, path: Union[str, Path]) -> Path:
        """Save parameters, optimizer moments, best weights, counters and RNG state."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "format_version": TRAIN_STATE_FORMAT_VERSION,
                "model_config": self.model.cfg.model_dump(mode="json"),
                "model": self.model.state_dict(),
                "best_model": self.best_state_dict,
                "optimizer": self.optimizer.state_dict(),
                "state": self.state.model_dump(),
                "torch_rng": torch.get_rng_state(),
            },
            path,
        )
        return path

    def resume(self, path: Union[str, Path]) -> TrainState:
        """Restore a :meth:`save_checkpoint` file into this trainer."""
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Checkpoint not found: {path}")
        try:
            payload = torch.load(path, map_location=self.device, weights_only=True)
            stored_version = str(payload["format_version"])
            stored_cfg: Dict[str, Any] = payload["model_config"]
        except Exception as e:
            raise VersionMismatchError(f"Corrupted or unreadable checkpoint {path}: {e}") from e
        if not is_format_compatible(stored_version, TRAIN_STATE_FORMAT_VERSION):
            raise VersionMismatchError(
                f"Checkpoint format {stored_version} is incompatible with {TRAIN_STATE_FORMAT_VERSION}"
            )
        current = self.model.cfg.model_dump(mode="json")
        for field, value in current.items():
            if stored_cfg.get(field) != value:
                raise VersionMismatchError(
                    f"Checkpoint model config differs in {field!r}: {stored_cfg.get(field)!r} != {value!r}"
                )
        self.model.load_state_dict(payload["model"])
        self.optimizer.load_state_dict(payload["optimizer"])
        self.best_state_dict = payload["best_model"]
        self.state = TrainState.model_validate(payload["state"])
        torch.set_rng_state(payload["torch_rng"])
        logger.info("resumed from %s at epoch %d (step %d)", path, self.state.epoch, self.state.step)
        return self.state


def checkpoint_save(trainer: Trainer, path: Union[str, Path]) -> Path:
    return trainer.save_checkpoint(path)


def checkpoint_resume(trainer: Trainer, path: Union[str, Path]) -> TrainState:
    return trainer.resume(path)


def train(
    model: ErrorNet,
    train_records: RecordSource,
    val_records: RecordSource,
    tcfg: TrainConfig,
    run_dir: Optional[Union[str, Path]] = None,
    extra_config: Optional[Dict[str, Any]] = None,
) -> Tuple[ErrorNet, List[EpochRecord]]:
    trainer = Trainer(model, tcfg, run_dir, extra_config)
    if tcfg.resume_from is not None:
        trainer.resume(tcfg.resume_from)
    return trainer.fit(train_records, val_records)


def train_from_manifest(
    model: ErrorNet,
    manifest: DatasetManifest,
    dataset_dir: Union[str, Path],
    tcfg: TrainConfig,
    run_dir: Optional[Union[str, Path]] = None,
    extra_config: Optional[Dict[str, Any]] = None,
) -> Tuple[ErrorNet, List[EpochRecord]]:
    """Train on the manifest's train split, selecting on its val split."""
    if manifest.patch_size != model.cfg.patch_size:
        raise ConfigError(
            f"Dataset patch size {manifest.patch_size} != model patch size {model.cfg.patch_size}"
        )
    train_set = ManifestRecords(manifest.records_for("train"), dataset_dir)
    val_set = ManifestRecords(manifest.records_for("val"), dataset_dir)
    return train(model, train_set, val_set, tcfg, run_dir, extra_config)


def model_config_for(tcfg: TrainConfig, base: Optional[ModelConfig] = None) -> ModelConfig:
    """Model config whose patch size follows the training config."""
    values = (base or ModelConfig()).model_dump()
    values["patch_size"] = tcfg.patch_size
    try:
        return ModelConfig.model_validate(values)
    except ValidationError as e:
        raise ConfigError(str(e)) from e
