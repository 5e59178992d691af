"""Misalignment simulation, landmark-centred patch extraction and splits."""

import json
import logging
import struct
from multiprocessing import Pool
from pathlib import Path
from typing import Any, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import (
    ConfigError,
    DataError,
    DuplicateIdError,
    FormatError,
    GeometryMismatchError,
    TooFewPatientsError,
)
from .ffd import (
    ControlGrid,
    DeformationSpec,
    dense_field,
    fit_landmark_bspline,
    magnitude_map,
    sample_random_grid,
    save_grid,
    warp_volume,
)
from .manifest import (
    DatasetManifest,
    DeformationStats,
    PatchEntry,
    SplitManifest,
    SplitName,
    get_library_version,
    save_manifest,
)
from .utils import hash64, make_rng
from .volume import (
    Landmark,
    LandmarkPairs,
    LandmarkSet,
    Modality,
    Vector3,
    Volume,
    crop_to_fov,
    load_landmark_pairs,
    load_landmarks,
    load_volume,
    resample_isotropic,
    resample_to_geometry,
)

logger = logging.getLogger(__name__)

PATCH_MAGIC = b"PRC1"
PATCH_FORMAT_VERSION = 1
PATCH_HEADER_SIZE = 64
# magic, version, P, reserved, 3 payload offsets, seed, deformation index
_HEADER_STRUCT = struct.Struct("<4sIII3QQI")
PATCH_DIVISOR = 32


class CaseDescriptor(BaseModel):
    """Paths to one subject's volumes and landmarks."""

    patient_id: str
    mri: Path
    ius: Path
    landmarks: Path
    landmark_pairs: Optional[Path] = None


def load_case_descriptor(path: Union[str, Path]) -> CaseDescriptor:
    """Read a case descriptor JSON; relative paths resolve against its folder."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Case descriptor not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
        descriptor = CaseDescriptor.model_validate(raw)
    except (json.JSONDecodeError, ValidationError) as e:
        raise FormatError(f"Invalid case descriptor {path}: {e}") from e

    def resolve(p: Optional[Path]) -> Optional[Path]:
        if p is None or p.is_absolute():
            return p
        return path.parent / p

    return descriptor.model_copy(
        update={
            "mri": resolve(descriptor.mri),
            "ius": resolve(descriptor.ius),
            "landmarks": resolve(descriptor.landmarks),
            "landmark_pairs": resolve(descriptor.landmark_pairs),
        }
    )


def save_case_descriptor(descriptor: CaseDescriptor, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(descriptor.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


class SimulatedDeformation(BaseModel):
    """One random misalignment of a case and its ground-truth error map."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    index: int
    seed: int
    warped_ius: Volume
    error: Volume
    grid: ControlGrid

    def stats(self, patient_id: str, fov: Optional[Volume] = None) -> DeformationStats:
        """Mean/max error over the nonzero iUS FOV (whole volume if empty)."""
        values = self.error.data
        if fov is not None:
            mask = fov.data != 0
            if np.any(mask):
                values = values[mask]
        return DeformationStats(
            patient_id=patient_id,
            deformation_index=self.index,
            seed=self.seed,
            interior_points=self.grid.interior_counts[0],
            mean_error_mm=float(np.mean(values, dtype=np.float64)),
            max_error_mm=float(np.max(values)),
        )


class PatchRecord(BaseModel):
    """Paired MRI/iUS patches, the error patch (mm) and provenance."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    mri_patch: np.ndarray
    ius_patch: np.ndarray
    error_patch: np.ndarray
    patient_id: str = ""
    landmark_id: str = ""
    deformation_index: int = Field(0, ge=0)
    n_deformations: Optional[int] = Field(None, ge=1)
    seed: int = 0
    center_world_mm: Vector3 = (0.0, 0.0, 0.0)
    window_start: Tuple[int, int, int] = (0, 0, 0)
    patch_origin_mm: Vector3 = (0.0, 0.0, 0.0)
    spacing_mm: Vector3 = (1.0, 1.0, 1.0)

    @field_validator("mri_patch", "ius_patch", "error_patch", mode="before")
    @classmethod
    def _as_float32(cls, value: Any) -> NDArray[np.float32]:
        return np.ascontiguousarray(value, dtype=np.float32)

    @model_validator(mode="after")
    def _check_patches(self) -> "PatchRecord":
        shape = self.mri_patch.shape
        if len(shape) != 3 or len(set(shape)) != 1:
            raise ValueError(f"patches must be cubic 3D arrays, got {shape}")
        if self.ius_patch.shape != shape or self.error_patch.shape != shape:
            raise ValueError("mri, ius and error patches must share dimensions")
        if np.any(self.error_patch < 0) or not np.all(np.isfinite(self.error_patch)):
            raise ValueError("error patch must be finite and >= 0")
        if self.n_deformations is not None and self.deformation_index >= self.n_deformations:
            raise ValueError(
                f"deformation index {self.deformation_index} out of range for {self.n_deformations} deformations"
            )
        return self

    @property
    def patch_size(self) -> int:
        return int(self.mri_patch.shape[0])

    @property
    def record_id(self) -> str:
        return record_id(self.patient_id, self.landmark_id, self.deformation_index)


def record_id(patient_id: str, landmark_id: str, deformation_index: int) -> str:
    return f"{patient_id}_{landmark_id}_{deformation_index}"


# ---------------------------------------------------------------------------
# Case preparation
# ---------------------------------------------------------------------------


def _with_case_context(patient_id: str, error: Exception) -> Exception:
    message = f"case {patient_id}: {error}"
    if isinstance(error, (DataError, FileNotFoundError)):
        return type(error)(message)
    return DataError(message)


def _at_spacing(volume: Volume, target_spacing_mm: Optional[float]) -> Volume:
    if target_spacing_mm is None or np.allclose(volume.spacing, target_spacing_mm, rtol=0, atol=1e-9):
        return volume
    return resample_isotropic(volume, target_spacing_mm)


def prepare_case(
    descriptor: CaseDescriptor,
    target_spacing_mm: Optional[float] = 0.5,
    fov_margin_mm: float = 0.0,
    ridge: float = 1e-6,
    fit_interior_points: Sequence[int] = (6, 6, 6),
) -> Tuple[Volume, Volume, LandmarkSet]:
    """Load a case and bring MRI and iUS onto one cropped isotropic grid.

    With landmark pairs present the iUS is first aligned to the MRI by a
    landmark B-spline (fixed = MRI, moving = iUS), which serves as the
    silver-standard registration that the simulated misalignments perturb.
    """
    try:
        mri = load_volume(descriptor.mri, modality=Modality.MRI)
        ius = load_volume(descriptor.ius, modality=Modality.IUS)
        landmarks = load_landmarks(descriptor.landmarks)
        pairs: Optional[LandmarkPairs] = None
        if descriptor.landmark_pairs is not None:
            pairs = load_landmark_pairs(descriptor.landmark_pairs)

        mri = _at_spacing(mri, target_spacing_mm)
        ius = resample_to_geometry(_at_spacing(ius, target_spacing_mm), mri)
        if pairs is not None and len(pairs) > 0:
            grid = fit_landmark_bspline(pairs, mri, fit_interior_points, ridge=ridge)
            ius = warp_volume(ius, dense_field(grid, mri))
            logger.info("%s: aligned iUS with %d landmark pairs", descriptor.patient_id, len(pairs))

        mri = crop_to_fov(ius, mri, fov_margin_mm)
        ius = crop_to_fov(ius, ius, fov_margin_mm)
        if not ius.same_geometry(mri):
            ius = resample_to_geometry(ius, mri)
    except (DataError, FileNotFoundError) as e:
        raise _with_case_context(descriptor.patient_id, e) from e
    return mri, ius, landmarks


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------


def deformation_seed(cohort_seed: int, patient_id: str, index: int) -> int:
    return hash64(cohort_seed, patient_id, index)


def simulate_deformation(
    ius: Volume, spec: DeformationSpec, patient_id: str, index: int
) -> SimulatedDeformation:
    seed = deformation_seed(spec.seed, patient_id, index)
    grid = sample_random_grid(spec.model_copy(update={"seed": seed}), ius)
    field = dense_field(grid, ius)
    return SimulatedDeformation(
        index=index,
        seed=seed,
        warped_ius=warp_volume(ius, field),
        error=magnitude_map(field),
        grid=grid,
    )


def _iter_deformations(
    mri: Volume, ius: Volume, spec: DeformationSpec, n_deformations: int, patient_id: str
) -> Iterator[SimulatedDeformation]:
    if not mri.same_geometry(ius):
        raise GeometryMismatchError(
            f"MRI {mri.shape} and iUS {ius.shape} must share geometry before simulation"
        )
    if n_deformations < 1:
        raise ConfigError(f"n_deformations must be >= 1, got {n_deformations}")
    for k in range(n_deformations):
        yield simulate_deformation(ius, spec, patient_id, k)


def simulate_case(
    mri: Volume,
    ius: Volume,
    landmarks: LandmarkSet,
    spec: DeformationSpec,
    n_deformations: int = 10,
    patient_id: str = "",
) -> List[SimulatedDeformation]:
    """Apply ``n_deformations`` independent random misalignments to the iUS.

    Deformation ``k`` is seeded with ``hash64(spec.seed, patient_id, k)``.
    """
    outside = ~mri.contains(landmarks.positions()) if len(landmarks) else np.zeros(0, bool)
    if np.any(outside):
        logger.warning("%s: %d landmark(s) lie outside the volume", patient_id, int(outside.sum()))
    return list(_iter_deformations(mri, ius, spec, n_deformations, patient_id))


# ---------------------------------------------------------------------------
# Patches
# ---------------------------------------------------------------------------


def check_patch_size(patch_size: int) -> None:
    if patch_size < PATCH_DIVISOR or patch_size % PATCH_DIVISOR != 0:
        raise ConfigError(f"patch size must be a positive multiple of {PATCH_DIVISOR}, got {patch_size}")


def normalize_patch(patch: NDArray[np.float32]) -> NDArray[np.float32]:
    """Min-max scale to [0, 1]; a constant patch maps to zeros."""
    lo = float(patch.min())
    hi = float(patch.max())
    if hi <= lo:
        return np.zeros_like(patch, dtype=np.float32)
    return ((patch.astype(np.float64) - lo) / (hi - lo)).astype(np.float32)


def patch_window(center_voxel: NDArray[np.int64], dims: Sequence[int], patch_size: int) -> Optional[Tuple[int, int, int]]:
    """Start index of a ``patch_size`` window centred on a voxel, clamped into bounds.

    Returns None when the volume is smaller than the patch along some axis.
    """
    half = patch_size // 2
    start: List[int] = []
    for c, n in zip(center_voxel, dims):
        if n < patch_size:
            return None
        start.append(int(min(max(int(c) - half, 0), n - patch_size)))
    return (start[0], start[1], start[2])


def landmark_windows(
    reference: Volume, landmarks: LandmarkSet, patch_size: int, patient_id: str = ""
) -> Iterator[Tuple[Landmark, Tuple[int, int, int]]]:
    """Patch window start for every usable landmark, in landmark order."""
    for landmark in landmarks.entries:
        if not bool(reference.contains(landmark.position)):
            logger.warning("%s: landmark %s is outside the volume; skipped", patient_id, landmark.id)
            continue
        center = np.rint(reference.world_to_voxel(landmark.position)).astype(np.int64)
        start = patch_window(center, reference.shape, patch_size)
        if start is None:
            logger.warning(
                "%s: volume %s is smaller than patch %d; landmark %s skipped",
                patient_id,
                reference.shape,
                patch_size,
                landmark.id,
            )
            continue
        yield landmark, start


def extract_patches(
    mri: Volume,
    warped_ius: Volume,
    error: Volume,
    landmarks: LandmarkSet,
    patch_size: int = 64,
    patient_id: str = "",
    deformation_index: int = 0,
    seed: int = 0,
    n_deformations: Optional[int] = None,
) -> List[PatchRecord]:
    """One record per landmark; landmarks without a valid window are skipped."""
    check_patch_size(patch_size)
    if not (mri.same_geometry(warped_ius) and mri.same_geometry(error)):
        raise GeometryMismatchError("MRI, warped iUS and error map must share geometry")

    records: List[PatchRecord] = []
    for landmark, start in landmark_windows(mri, landmarks, patch_size, patient_id):
        window = tuple(slice(s, s + patch_size) for s in start)
        records.append(
            PatchRecord(
                mri_patch=normalize_patch(mri.data[window]),
                ius_patch=normalize_patch(warped_ius.data[window]),
                error_patch=error.data[window],
                patient_id=patient_id,
                landmark_id=landmark.id,
                deformation_index=deformation_index,
                n_deformations=n_deformations,
                seed=seed,
                center_world_mm=landmark.position,
                window_start=start,
                patch_origin_mm=tuple(mri.voxel_to_world(np.asarray(start))),
                spacing_mm=mri.spacing,
            )
        )
    return records


def write_patch_record(record: PatchRecord, path: Union[str, Path]) -> Tuple[int, int, int]:
    """Write the 64-byte PRC1 header and the mri, ius, error payloads.

    Returns the byte offsets of the three payloads.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    p = record.patch_size
    nbytes = p * p * p * 4
    offsets = (PATCH_HEADER_SIZE, PATCH_HEADER_SIZE + nbytes, PATCH_HEADER_SIZE + 2 * nbytes)
    header = _HEADER_STRUCT.pack(
        PATCH_MAGIC, PATCH_FORMAT_VERSION, p, 0, *offsets, record.seed, record.deformation_index
    ).ljust(PATCH_HEADER_SIZE, b"\x00")
    with open(path, "wb") as f:
        f.write(header)
        for arr in (record.mri_patch, record.ius_patch, record.error_patch):
            f.write(arr.reshape(-1, order="F").astype("<f4").tobytes())
    return offsets


def read_patch_record(path: Union[str, Path], entry: Optional[PatchEntry] = None) -> PatchRecord:
    """Read a PRC1 file; provenance fields are taken from ``entry`` when given."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Patch record not found: {path}")
    blob = path.read_bytes()
    if len(blob) < PATCH_HEADER_SIZE:
        raise FormatError(f"{path} is too short for a patch header")
    magic, fmt_version, p, _, o1, o2, o3, seed, k = _HEADER_STRUCT.unpack_from(blob)
    if magic != PATCH_MAGIC:
        raise FormatError(f"{path} is not a patch record (magic {magic!r})")
    if fmt_version != PATCH_FORMAT_VERSION:
        raise FormatError(f"{path} has unsupported patch format version {fmt_version}")
    count = p * p * p
    arrays: List[NDArray[np.float32]] = []
    for offset in (o1, o2, o3):
        if offset + count * 4 > len(blob):
            raise FormatError(f"{path} is truncated")
        flat = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        arrays.append(flat.reshape((p, p, p), order="F"))

    extra: dict[str, Any] = {}
    if entry is not None:
        extra = {
            "patient_id": entry.patient_id,
            "landmark_id": entry.landmark_id,
            "center_world_mm": entry.center_world_mm,
            "window_start": entry.window_start,
            "patch_origin_mm": entry.patch_origin_mm,
            "spacing_mm": entry.spacing_mm,
        }
    return PatchRecord(
        mri_patch=arrays[0],
        ius_patch=arrays[1],
        error_patch=arrays[2],
        deformation_index=int(k),
        seed=int(seed),
        **extra,
    )


def load_entry_record(dataset_dir: Union[str, Path], entry: PatchEntry) -> PatchRecord:
    return read_patch_record(Path(dataset_dir) / entry.file, entry)


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


def split_counts(n_patients: int, fractions: Sequence[float] = (0.6, 0.2, 0.2)) -> Tuple[int, int, int]:
    """Round train first, then val; test takes the rest. Each split gets >= 1."""
    if n_patients < 3:
        raise TooFewPatientsError(f"A three-way split needs >= 3 patients, got {n_patients}")
    n_train = max(1, round(fractions[0] * n_patients))
    n_val = max(1, round(fractions[1] * n_patients))
    while n_train + n_val > n_patients - 1:
        if n_train >= n_val and n_train > 1:
            n_train -= 1
        else:
            n_val -= 1
    return n_train, n_val, n_patients - n_train - n_val


def make_split(
    patients: Sequence[str],
    fractions: Sequence[float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> SplitManifest:
    """Subject-wise split, shuffled deterministically by ``seed``."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-6:
        raise ConfigError(f"split fractions must be 3 non-negative values summing to 1, got {fractions}")
    if len(set(patients)) != len(patients):
        raise DuplicateIdError("Patient ids passed to make_split must be unique")
    n_train, n_val, _ = split_counts(len(patients), fractions)

    order = make_rng(seed).permutation(len(patients))
    ordered = sorted(patients)
    assignment: dict[str, SplitName] = {}
    for rank, idx in enumerate(order):
        name: SplitName = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
        assignment[ordered[int(idx)]] = name
    return SplitManifest(
        assignment=dict(sorted(assignment.items())),
        fractions=(float(fractions[0]), float(fractions[1]), float(fractions[2])),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Dataset build
# ---------------------------------------------------------------------------


class BuildOptions(BaseModel):
    spec: DeformationSpec
    patch_size: int = 64
    n_deformations: int = 10
    target_spacing_mm: Optional[float] = 0.5
    fov_margin_mm: float = 0.0
    ridge: float = 1e-6
    save_grids: bool = True


def _build_case(args: Tuple[CaseDescriptor, BuildOptions, Path]) -> Tuple[List[PatchEntry], List[DeformationStats]]:
    descriptor, options, out_dir = args
    pid = descriptor.patient_id
    mri, ius, landmarks = prepare_case(
        descriptor,
        target_spacing_mm=options.target_spacing_mm,
        fov_margin_mm=options.fov_margin_mm,
        ridge=options.ridge,
    )
    entries: List[PatchEntry] = []
    stats: List[DeformationStats] = []
    try:
        for deformation in _iter_deformations(mri, ius, options.spec, options.n_deformations, pid):
            k = deformation.index
            stats.append(deformation.stats(pid, fov=ius))
            grid_file: Optional[str] = None
            if options.save_grids:
                grid_file = f"grids/{pid}_{k}.json"
                save_grid(deformation.grid, out_dir / grid_file)
            for record in extract_patches(
                mri,
                deformation.warped_ius,
                deformation.error,
                landmarks,
                options.patch_size,
                patient_id=pid,
                deformation_index=k,
                seed=deformation.seed,
                n_deformations=options.n_deformations,
            ):
                file = f"patches/{record.record_id}.pr"
                offsets = write_patch_record(record, out_dir / file)
                entries.append(
                    PatchEntry(
                        record_id=record.record_id,
                        file=file,
                        patient_id=pid,
                        landmark_id=record.landmark_id,
                        deformation_index=k,
                        seed=deformation.seed,
                        patch_size=options.patch_size,
                        center_world_mm=record.center_world_mm,
                        window_start=record.window_start,
                        patch_origin_mm=record.patch_origin_mm,
                        spacing_mm=record.spacing_mm,
                        offsets=offsets,
                        grid_file=grid_file,
                        mean_error_mm=float(np.mean(record.error_patch, dtype=np.float64)),
                        max_error_mm=float(record.error_patch.max()),
                    )
                )
    except DataError as e:
        raise _with_case_context(pid, e) from e
    logger.info("%s: %d patches from %d deformations", pid, len(entries), len(stats))
    return entries, stats


def build_dataset(
    cases: Sequence[CaseDescriptor],
    spec: DeformationSpec,
    patch_size: int,
    out_dir: Union[str, Path],
    n_deformations: int = 10,
    target_spacing_mm: Optional[float] = 0.5,
    fov_margin_mm: float = 0.0,
    ridge: float = 1e-6,
    fractions: Sequence[float] = (0.6, 0.2, 0.2),
    jobs: int = 1,
) -> DatasetManifest:
    """Simulate, extract and serialize every case; write ``manifest.json``.

    The output is a pure function of the inputs and ``spec.seed``: records
    are sorted by (patient, landmark, deformation) before the manifest is
    written. With three or more patients a subject-wise split is included.
    """
    check_patch_size(patch_size)
    ids = [c.patient_id for c in cases]
    if len(set(ids)) != len(ids):
        raise DuplicateIdError("Case descriptors must have unique patient ids")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    options = BuildOptions(
        spec=spec,
        patch_size=patch_size,
        n_deformations=n_deformations,
        target_spacing_mm=target_spacing_mm,
        fov_margin_mm=fov_margin_mm,
        ridge=ridge,
    )
    work = [(c, options, out) for c in cases]
    if jobs > 1 and len(work) > 1:
        with Pool(min(jobs, len(work))) as pool:
            results = pool.map(_build_case, work)
    else:
        results = [_build_case(w) for w in work]

    entries = sorted(
        (e for case_entries, _ in results for e in case_entries),
        key=lambda e: (e.patient_id, e.landmark_id, e.deformation_index),
    )
    stats = sorted(
        (s for _, case_stats in results for s in case_stats),
        key=lambda s: (s.patient_id, s.deformation_index),
    )
    split: Optional[SplitManifest] = None
    if len(ids) >= 3:
        split = make_split(ids, fractions, seed=spec.seed)
    else:
        logger.warning("Only %d patient(s); manifest written without a split", len(ids))

    manifest = DatasetManifest(
        library_version=get_library_version(),
        patch_size=patch_size,
        cohort_seed=spec.seed,
        n_deformations=n_deformations,
        max_points_per_axis=spec.max_points_per_axis,
        max_displacement_mm=spec.max_displacement_mm,
        target_spacing_mm=target_spacing_mm,
        records=entries,
        deformations=stats,
        split=split,
    )
    save_manifest(manifest, out)
    return manifest


def with_split(manifest: DatasetManifest, split: SplitManifest) -> DatasetManifest:
    """Manifest copy carrying ``split``; every manifest patient must be assigned."""
    missing = sorted(set(manifest.patient_ids()) - set(split.assignment))
    if missing:
        raise DataError(f"Split does not assign patients: {', '.join(missing)}")
    return manifest.model_copy(update={"split": split})
