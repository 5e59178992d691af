"""Versioned on-disk index of a patch dataset (``manifest.json``)."""

import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

from packaging import version
from pydantic import BaseModel, Field, ValidationError, model_validator

from .errors import FormatError, VersionMismatchError

logger = logging.getLogger(__name__)

MANIFEST_FORMAT_VERSION = "1.0"
MANIFEST_NAME = "manifest.json"

SplitName = Literal["train", "val", "test"]
SPLIT_NAMES: Tuple[SplitName, SplitName, SplitName] = ("train", "val", "test")


class PatchEntry(BaseModel):
    """One patch record file plus its provenance."""

    record_id: str
    file: str
    patient_id: str
    landmark_id: str
    deformation_index: int = Field(ge=0)
    seed: int = Field(ge=0, lt=2**64)
    patch_size: int
    center_world_mm: Tuple[float, float, float]
    window_start: Tuple[int, int, int]
    patch_origin_mm: Tuple[float, float, float]
    spacing_mm: Tuple[float, float, float]
    offsets: Tuple[int, int, int]
    grid_file: Optional[str] = None
    mean_error_mm: float = 0.0
    max_error_mm: float = 0.0


class DeformationStats(BaseModel):
    """Summary of one simulated misalignment of a case."""

    patient_id: str
    deformation_index: int
    seed: int
    interior_points: int
    mean_error_mm: float
    max_error_mm: float


class SplitManifest(BaseModel):
    assignment: Dict[str, SplitName]
    fractions: Tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0

    def patients(self, split: SplitName) -> List[str]:
        return sorted(p for p, s in self.assignment.items() if s == split)

    def counts(self) -> Dict[str, int]:
        return {name: len(self.patients(name)) for name in SPLIT_NAMES}


class DatasetManifest(BaseModel):
    """Index of every patch written by a dataset build."""

    version: str = MANIFEST_FORMAT_VERSION
    library_version: str = "unknown"
    patch_size: int
    cohort_seed: int
    n_deformations: int
    max_points_per_axis: int
    max_displacement_mm: float
    target_spacing_mm: Optional[float] = None
    records: List[PatchEntry] = []
    deformations: List[DeformationStats] = []
    split: Optional[SplitManifest] = None

    @model_validator(mode="after")
    def _check_deformation_indices(self) -> "DatasetManifest":
        if self.n_deformations < 1:
            raise ValueError(f"n_deformations must be >= 1, got {self.n_deformations}")
        for item in [*self.records, *self.deformations]:
            if not 0 <= item.deformation_index < self.n_deformations:
                raise ValueError(
                    f"{item.patient_id}: deformation index {item.deformation_index} "
                    f"out of range for {self.n_deformations} deformations"
                )
        return self

    def patient_ids(self) -> List[str]:
        return sorted({r.patient_id for r in self.records})

    def records_for(self, split: Optional[SplitName]) -> List[PatchEntry]:
        """Records of one split, or all records when ``split`` is None."""
        if split is None:
            return list(self.records)
        if self.split is None:
            raise FormatError("Manifest has no split; run `regerr split` first")
        members = set(self.split.patients(split))
        return [r for r in self.records if r.patient_id in members]


def is_format_compatible(stored_version: str, current_version: str) -> bool:
    """Check whether an artifact written at ``stored_version`` can be read.

    Versions within one major release are compatible in both directions;
    different major versions never are.
    """
    if stored_version == current_version:
        return True
    try:
        stored = version.parse(stored_version)
        current = version.parse(current_version)
    except version.InvalidVersion:
        return False
    return stored.major == current.major


def save_manifest(manifest: DatasetManifest, out_dir: Union[str, Path]) -> Path:
    """Write ``manifest.json`` deterministically (no timestamps, stable order)."""
    path = Path(out_dir) / MANIFEST_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True)
    path.write_text(text + "\n", encoding="utf-8")
    return path


def load_manifest(path: Union[str, Path]) -> DatasetManifest:
    """Load a manifest from a file or from a dataset directory."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"Dataset manifest not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        manifest = DatasetManifest.model_validate(data)
    except (json.JSONDecodeError, ValidationError) as e:
        raise FormatError(f"Failed to parse manifest {path}: {e}") from e
    if not is_format_compatible(manifest.version, MANIFEST_FORMAT_VERSION):
        raise VersionMismatchError(
            f"Manifest format {manifest.version} is incompatible with {MANIFEST_FORMAT_VERSION}"
        )
    return manifest


def manifest_hash(path: Union[str, Path]) -> str:
    """SHA-256 of the manifest file bytes."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    return hashlib.sha256(path.read_bytes()).hexdigest()


def get_library_version() -> str:
    """Get the current library version from package metadata or pyproject.toml."""
    try:
        from importlib.metadata import version as dist_version

        return dist_version("regerr")
    except Exception:
        pass

    try:
        import toml

        pyproject_path = Path(__file__).parent.parent / "pyproject.toml"
        if pyproject_path.exists():
            with open(pyproject_path, "r", encoding="utf-8") as f:
                pyproject_data = toml.load(f)
            return pyproject_data.get("project", {}).get("version", "unknown")
    except Exception:
        pass

    return "unknown"
