"""3D volumes and landmark sets with axis-aligned world geometry.

World coordinate of voxel (i, j, k) is ``origin + (i, j, k) * spacing`` in
millimetres. Volumes are stored as float32 arrays indexed ``[x, y, z]``.
"""

import csv
import json
import logging
import math
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy import ndimage

from .errors import (
    DegenerateVolumeError,
    DomainError,
    DuplicateIdError,
    FormatError,
    NoOverlapError,
    UnsupportedFormatError,
)

logger = logging.getLogger(__name__)

Vector3 = Tuple[float, float, float]
VolumeFormat = Literal["raw_json", "nifti"]

# Slack for float noise when deciding whether a sample point is in bounds.
_BOUNDS_TOL = 1e-6


class Modality(str, Enum):
    MRI = "MRI"
    IUS = "iUS"
    ERROR = "ERROR"
    OTHER = "OTHER"


def _check_vector3(value: Any, name: str, positive: bool = False) -> Vector3:
    vec = tuple(float(v) for v in value)
    if len(vec) != 3:
        raise ValueError(f"{name} must have 3 components, got {len(vec)}")
    if not all(math.isfinite(v) for v in vec):
        raise ValueError(f"{name} must be finite, got {vec}")
    if positive and not all(v > 0 for v in vec):
        raise ValueError(f"{name} components must be > 0, got {vec}")
    return (vec[0], vec[1], vec[2])


class Volume(BaseModel):
    """A 3D scalar image with world-space geometry."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    data: np.ndarray
    spacing: Vector3 = (1.0, 1.0, 1.0)
    origin: Vector3 = (0.0, 0.0, 0.0)
    modality: Modality = Modality.OTHER

    @field_validator("data", mode="before")
    @classmethod
    def _coerce_data(cls, value: Any) -> NDArray[np.float32]:
        arr = np.ascontiguousarray(value, dtype=np.float32)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"volume data must be 3D with dims >= 1, got {arr.shape}")
        return arr

    @field_validator("spacing", mode="before")
    @classmethod
    def _coerce_spacing(cls, value: Any) -> Vector3:
        return _check_vector3(value, "spacing", positive=True)

    @field_validator("origin", mode="before")
    @classmethod
    def _coerce_origin(cls, value: Any) -> Vector3:
        return _check_vector3(value, "origin")

    @property
    def shape(self) -> Tuple[int, int, int]:
        x, y, z = self.data.shape
        return (int(x), int(y), int(z))

    def voxel_to_world(self, index: Any) -> NDArray[np.float64]:
        """Map voxel indices (..., 3) to world positions in mm."""
        idx = np.asarray(index, dtype=np.float64)
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)

    def world_to_voxel(self, points: Any) -> NDArray[np.float64]:
        """Map world positions (..., 3) in mm to fractional voxel indices."""
        pts = np.asarray(points, dtype=np.float64)
        return (pts - np.asarray(self.origin)) / np.asarray(self.spacing)

    def center_bounds(self) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
        """World positions of the first and last voxel centres."""
        lo = np.asarray(self.origin, dtype=np.float64)
        hi = self.voxel_to_world(np.asarray(self.shape) - 1)
        return lo, hi

    def contains(self, points: Any) -> NDArray[np.bool_]:
        """Whether world points lie inside the span of voxel centres."""
        idx = self.world_to_voxel(points)
        upper = np.asarray(self.shape, dtype=np.float64) - 1
        return np.all((idx >= -_BOUNDS_TOL) & (idx <= upper + _BOUNDS_TOL), axis=-1)

    def same_geometry(self, other: "Volume") -> bool:
        return (
            self.shape == other.shape
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=1e-9)
            and np.allclose(self.origin, other.origin, rtol=0, atol=1e-9)
        )

    def with_data(self, data: Any, modality: Optional[Modality] = None) -> "Volume":
        """New volume on the same grid with a different payload."""
        return Volume(
            data=data,
            spacing=self.spacing,
            origin=self.origin,
            modality=modality or self.modality,
        )


class Landmark(BaseModel):
    id: str
    position: Vector3

    @field_validator("position", mode="before")
    @classmethod
    def _coerce_position(cls, value: Any) -> Vector3:
        return _check_vector3(value, "position")


class LandmarkPair(BaseModel):
    id: str
    fixed_position: Vector3
    moving_position: Vector3

    @field_validator("fixed_position", "moving_position", mode="before")
    @classmethod
    def _coerce_positions(cls, value: Any) -> Vector3:
        return _check_vector3(value, "position")

    @property
    def displacement(self) -> NDArray[np.float64]:
        return np.asarray(self.moving_position) - np.asarray(self.fixed_position)


def _ensure_unique(ids: Sequence[str]) -> None:
    seen: set[str] = set()
    for landmark_id in ids:
        if landmark_id in seen:
            raise DuplicateIdError(f"Duplicate landmark id: {landmark_id}")
        seen.add(landmark_id)


class LandmarkSet(BaseModel):
    entries: List[Landmark] = []

    @model_validator(mode="after")
    def _unique_ids(self) -> "LandmarkSet":
        _ensure_unique([e.id for e in self.entries])
        return self

    def positions(self) -> NDArray[np.float64]:
        if not self.entries:
            return np.zeros((0, 3))
        return np.asarray([e.position for e in self.entries], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.entries)


class LandmarkPairs(BaseModel):
    pairs: List[LandmarkPair] = []

    @model_validator(mode="after")
    def _unique_ids(self) -> "LandmarkPairs":
        _ensure_unique([p.id for p in self.pairs])
        return self

    def fixed_positions(self) -> NDArray[np.float64]:
        return np.asarray([p.fixed_position for p in self.pairs], dtype=np.float64).reshape(-1, 3)

    def moving_positions(self) -> NDArray[np.float64]:
        return np.asarray([p.moving_position for p in self.pairs], dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.pairs)


# ---------------------------------------------------------------------------
# raw_json container
# ---------------------------------------------------------------------------


def raw_json_paths(path: Path) -> Tuple[Path, Path]:
    """Header and payload paths for ``<name>``, ``<name>.json`` or ``<name>.raw``."""
    if path.suffix in (".json", ".raw"):
        stem = path.with_suffix("")
    else:
        stem = path
    return stem.with_name(stem.name + ".json"), stem.with_name(stem.name + ".raw")


def write_raw_json(
    path: Path,
    array: NDArray[Any],
    spacing: Vector3,
    origin: Vector3,
    modality: Modality,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write an (X, Y, Z) or (X, Y, Z, C) array as a raw_json pair.

    Components are interleaved per voxel and voxels are x-fastest.
    Returns the header path.
    """
    header_path, payload_path = raw_json_paths(path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    components = 1 if array.ndim == 3 else int(array.shape[3])
    header: Dict[str, Any] = {
        "dims": [int(d) for d in array.shape[:3]],
        "spacing": list(spacing),
        "origin": list(origin),
        "dtype": "f32",
        "order": "x-fastest",
        "modality": modality.value,
    }
    if components != 1:
        header["components"] = components
        flat = np.moveaxis(array, -1, 0).reshape(-1, order="F")
    else:
        flat = array.reshape(-1, order="F")
    if extra:
        header.update(extra)
    with open(header_path, "w", encoding="utf-8") as f:
        json.dump(header, f, indent=2)
    flat.astype("<f4").tofile(payload_path)
    return header_path


def read_raw_json(path: Path) -> Tuple[Dict[str, Any], NDArray[np.float32]]:
    """Read a raw_json pair; returns the header and an (X,Y,Z[,C]) array."""
    header_path, payload_path = raw_json_paths(path)
    if not header_path.exists():
        raise FileNotFoundError(f"Volume header not found: {header_path}")
    if not payload_path.exists():
        raise FileNotFoundError(f"Volume payload not found: {payload_path}")
    try:
        with open(header_path, "r", encoding="utf-8") as f:
            header: Dict[str, Any] = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"Malformed header {header_path}: {e}") from e

    try:
        dims = [int(d) for d in header["dims"]]
        components = int(header.get("components", 1))
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"Malformed header {header_path}: {e}") from e
    if len(dims) != 3 or min(dims) < 1 or components < 1:
        raise FormatError(f"Invalid dims in {header_path}: {dims}")
    if header.get("dtype", "f32") != "f32":
        raise FormatError(f"Unsupported dtype in {header_path}: {header.get('dtype')}")
    if header.get("order", "x-fastest") != "x-fastest":
        raise FormatError(f"Unsupported order in {header_path}: {header.get('order')}")

    flat = np.fromfile(payload_path, dtype="<f4")
    expected = dims[0] * dims[1] * dims[2] * components
    if flat.size != expected:
        raise FormatError(
            f"Payload {payload_path} holds {flat.size} values, header expects {expected}"
        )
    if components == 1:
        array = flat.reshape(dims, order="F")
    else:
        array = np.moveaxis(flat.reshape([components, *dims], order="F"), 0, -1)
    return header, np.ascontiguousarray(array, dtype=np.float32)


def _header_geometry(header: Dict[str, Any], source: Path) -> Tuple[Vector3, Vector3, Modality]:
    try:
        spacing = _check_vector3(header["spacing"], "spacing", positive=True)
        origin = _check_vector3(header["origin"], "origin")
        modality = Modality(header.get("modality", "OTHER"))
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"Malformed header for {source}: {e}") from e
    return spacing, origin, modality


def _load_nifti(path: Path, modality: Optional[Modality]) -> Volume:
    import nibabel as nib
    from nibabel.processing import resample_to_output

    if not path.exists():
        raise FileNotFoundError(f"Volume not found: {path}")
    try:
        img: Any = nib.load(str(path))  # pyright: ignore[reportPrivateImportUsage]
    except Exception as e:
        raise FormatError(f"Cannot read NIfTI {path}: {e}") from e

    affine = np.asarray(img.affine, dtype=np.float64)
    linear = affine[:3, :3]
    axis_aligned = np.allclose(linear, np.diag(np.diag(linear))) and bool(
        np.all(np.diag(linear) > 0)
    )
    if not axis_aligned:
        logger.info("Resampling oblique/flipped NIfTI %s to an axis-aligned grid", path)
        img = resample_to_output(img, order=1)
        affine = np.asarray(img.affine, dtype=np.float64)

    data = np.asarray(img.get_fdata(dtype=np.float32))
    while data.ndim > 3 and data.shape[-1] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise FormatError(f"Expected a 3D NIfTI volume in {path}, got shape {data.shape}")
    return Volume(
        data=data,
        spacing=tuple(np.diag(affine)[:3]),
        origin=tuple(affine[:3, 3]),
        modality=modality or Modality.OTHER,
    )


def infer_format(path: Path) -> VolumeFormat:
    name = path.name.lower()
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        return "nifti"
    if path.suffix in (".json", ".raw", ""):
        return "raw_json"
    raise UnsupportedFormatError(f"Cannot infer volume format for {path}")


def load_volume(
    path: Union[str, Path],
    format: Optional[str] = None,
    modality: Optional[Modality] = None,
) -> Volume:
    """Load a volume in the canonical raw_json format or from NIfTI.

    Intensities are returned unmodified as float32.
    """
    path = Path(path)
    fmt = format or infer_format(path)
    if fmt == "raw_json":
        header, array = read_raw_json(path)
        if array.ndim != 3:
            raise FormatError(f"{path} holds a multi-component field, not a scalar volume")
        spacing, origin, header_modality = _header_geometry(header, path)
        return Volume(
            data=array, spacing=spacing, origin=origin, modality=modality or header_modality
        )
    if fmt == "nifti":
        return _load_nifti(path, modality)
    raise UnsupportedFormatError(f"Unsupported volume format: {fmt}")


def save_volume(volume: Volume, path: Union[str, Path]) -> Path:
    """Write a volume as a raw_json pair and return the header path."""
    return write_raw_json(
        Path(path), volume.data, volume.spacing, volume.origin, volume.modality
    )


# ---------------------------------------------------------------------------
# Interpolation
# ---------------------------------------------------------------------------


def trilinear_sample(
    data: NDArray[np.float32],
    coords: NDArray[np.float64],
    bounds: Literal["strict", "extent"] = "strict",
) -> NDArray[np.float32]:
    """Trilinear interpolation of ``data`` at fractional voxel indices.

    ``coords`` has shape (3, ...). With ``bounds="strict"`` samples outside
    [0, n-1] on any axis are 0. With ``bounds="extent"`` samples within the
    voxel footprint [-0.5, n-0.5] take the edge-replicated value and only
    samples beyond it are 0.
    """
    shape = np.asarray(data.shape, dtype=np.float64).reshape((3,) + (1,) * (coords.ndim - 1))
    if bounds == "strict":
        lo, hi = 0.0 - _BOUNDS_TOL, shape - 1 + _BOUNDS_TOL
    else:
        lo, hi = -0.5 - _BOUNDS_TOL, shape - 0.5 + _BOUNDS_TOL
    inside = np.all((coords >= lo) & (coords <= hi), axis=0)
    clamped = np.clip(coords, 0.0, shape - 1)
    values = ndimage.map_coordinates(
        data, clamped, order=1, mode="nearest", prefilter=False, output=np.float32
    )
    values[~inside] = 0.0
    return values


def resample_isotropic(volume: Volume, target_spacing: float) -> Volume:
    """Resample to an isotropic grid of ``target_spacing`` mm.

    The output grid covers the input's physical extent (voxel footprints);
    output dims are ``ceil(extent_mm / target_spacing)``.
    """
    if not (math.isfinite(target_spacing) and target_spacing > 0):
        raise DomainError(f"target_spacing must be > 0, got {target_spacing}")
    t = float(target_spacing)
    spacing = np.asarray(volume.spacing, dtype=np.float64)
    dims = np.asarray(volume.shape)

    for axis in range(3):
        if dims[axis] < 2 and spacing[axis] != t:
            raise DegenerateVolumeError(
                f"Axis {axis} has {dims[axis]} voxel(s); cannot interpolate to {t} mm"
            )

    extent = dims * spacing
    out_dims = np.ceil(np.round(extent / t, 9)).astype(int)
    # Output voxel i along an axis sits at input index ((t - s)/2 + i*t) / s.
    offset = (t - spacing) / 2.0 / spacing
    scale = t / spacing
    coords = np.stack(
        np.meshgrid(
            *[offset[a] + np.arange(out_dims[a]) * scale[a] for a in range(3)],
            indexing="ij",
        )
    )
    # centres past the last input centre replicate the edge
    coords = np.clip(coords, 0.0, (dims - 1).reshape(3, 1, 1, 1))
    out = trilinear_sample(volume.data, coords, bounds="extent")
    out_origin = np.asarray(volume.origin) + (t - spacing) / 2.0
    return Volume(data=out, spacing=(t, t, t), origin=tuple(out_origin), modality=volume.modality)


def resample_to_geometry(volume: Volume, reference: Volume) -> Volume:
    """Sample ``volume`` on ``reference``'s voxel grid (strict bounds)."""
    if volume.same_geometry(reference):
        return volume
    index_grid = np.stack(np.meshgrid(*[np.arange(n) for n in reference.shape], indexing="ij"))
    world = reference.voxel_to_world(np.moveaxis(index_grid, 0, -1))
    coords = np.moveaxis(volume.world_to_voxel(world), -1, 0)
    return reference.with_data(
        trilinear_sample(volume.data, coords, bounds="strict"), modality=volume.modality
    )


def crop_to_fov(reference: Volume, target: Volume, margin_mm: float = 0.0) -> Volume:
    """Restrict ``target`` to the world bounding box of ``reference``'s nonzero voxels."""
    if margin_mm < 0:
        raise DomainError(f"margin_mm must be >= 0, got {margin_mm}")
    nonzero = np.argwhere(reference.data != 0)
    if nonzero.size == 0:
        raise NoOverlapError("Reference volume has no nonzero voxels")
    world = reference.voxel_to_world(nonzero)
    lo_mm = world.min(axis=0) - margin_mm
    hi_mm = world.max(axis=0) + margin_mm

    dims = np.asarray(target.shape)
    lo_idx = np.ceil(target.world_to_voxel(lo_mm) - _BOUNDS_TOL).astype(int)
    hi_idx = np.floor(target.world_to_voxel(hi_mm) + _BOUNDS_TOL).astype(int)
    lo_idx = np.maximum(lo_idx, 0)
    hi_idx = np.minimum(hi_idx, dims - 1)
    if np.any(lo_idx > hi_idx):
        raise NoOverlapError(
            f"Reference FOV [{lo_mm}, {hi_mm}] mm does not intersect the target volume"
        )
    window = tuple(slice(int(lo), int(hi) + 1) for lo, hi in zip(lo_idx, hi_idx))
    return Volume(
        data=target.data[window],
        spacing=target.spacing,
        origin=tuple(target.voxel_to_world(lo_idx)),
        modality=target.modality,
    )


# ---------------------------------------------------------------------------
# Landmark CSVs
# ---------------------------------------------------------------------------

LANDMARK_COLUMNS = ["id", "x_mm", "y_mm", "z_mm"]
PAIR_COLUMNS = ["id", "fx_mm", "fy_mm", "fz_mm", "mx_mm", "my_mm", "mz_mm"]


def _read_csv_rows(path: Path, columns: List[str]) -> List[Dict[str, str]]:
    if not path.exists():
        raise FileNotFoundError(f"Landmark file not found: {path}")
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        header = [h.strip() for h in (reader.fieldnames or [])]
        if header != columns:
            raise FormatError(f"{path}: expected header {','.join(columns)}, got {','.join(header)}")
        rows: List[Dict[str, str]] = []
        for row in reader:
            rows.append({k.strip(): (v or "").strip() for k, v in row.items() if k is not None})
    return rows


def _floats(row: Dict[str, str], keys: List[str], path: Path) -> Vector3:
    try:
        return _check_vector3([float(row[k]) for k in keys], "position")
    except (KeyError, ValueError) as e:
        raise FormatError(f"{path}: bad coordinates in row {row}: {e}") from e


def load_landmarks(path: Union[str, Path]) -> LandmarkSet:
    """Read ``id,x_mm,y_mm,z_mm`` rows into a LandmarkSet."""
    path = Path(path)
    rows = _read_csv_rows(path, LANDMARK_COLUMNS)
    entries = [
        Landmark(id=row["id"], position=_floats(row, LANDMARK_COLUMNS[1:], path))
        for row in rows
    ]
    _ensure_unique([e.id for e in entries])
    return LandmarkSet(entries=entries)


def load_landmark_pairs(path: Union[str, Path]) -> LandmarkPairs:
    """Read ``id,fx_mm,fy_mm,fz_mm,mx_mm,my_mm,mz_mm`` rows into LandmarkPairs."""
    path = Path(path)
    rows = _read_csv_rows(path, PAIR_COLUMNS)
    pairs = [
        LandmarkPair(
            id=row["id"],
            fixed_position=_floats(row, PAIR_COLUMNS[1:4], path),
            moving_position=_floats(row, PAIR_COLUMNS[4:7], path),
        )
        for row in rows
    ]
    _ensure_unique([p.id for p in pairs])
    return LandmarkPairs(pairs=pairs)


def save_landmarks(landmarks: LandmarkSet, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LANDMARK_COLUMNS)
        for entry in landmarks.entries:
            writer.writerow([entry.id, *(repr(float(v)) for v in entry.position)])
    return path


def save_landmark_pairs(pairs: LandmarkPairs, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(PAIR_COLUMNS)
        for pair in pairs.pairs:
            writer.writerow(
                [
                    pair.id,
                    *(repr(float(v)) for v in pair.fixed_position),
                    *(repr(float(v)) for v in pair.moving_position),
                ]
            )
    return path
