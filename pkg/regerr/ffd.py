"""Cubic B-spline free-form deformations.

A ControlGrid holds displacement coefficients (mm) on a regular lattice.
For a world point x, with ``u = (x - origin_mm) / spacing_mm`` per axis,
``cell = floor(u)`` and ``t = u - cell``, the displacement is the
tensor-product sum of ``B_l(t)`` weights over coefficients
``cell - 1 + l`` for ``l`` in 0..3.

Grids created here lay out ``n`` interior control points per axis, centred
in equal slabs of the volume's physical extent, plus a zero padding ring
``GRID_PADDING`` points wide on each side, so every voxel has full support.
"""

import json
import logging
import math
from itertools import product
from pathlib import Path
from typing import Any, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy import linalg

from .errors import (
    CoverageError,
    DomainError,
    EmptyPairsError,
    FormatError,
    GeometryMismatchError,
    OutOfExtentError,
)
from .utils import make_rng
from .volume import (
    LandmarkPairs,
    Modality,
    Vector3,
    Volume,
    raw_json_paths,
    read_raw_json,
    trilinear_sample,
    write_raw_json,
)

logger = logging.getLogger(__name__)

GRID_PADDING = 2

# Exposed so selfcheck can perturb it; the basis must stay a partition of unity.
BASIS_SCALE = 1.0 / 6.0


class DeformationSpec(BaseModel):
    """Parameters of the random misalignment generator."""

    seed: int = Field(0, ge=0, lt=2**64)
    max_points_per_axis: int = Field(20, ge=1)
    max_displacement_mm: float = Field(10.0, ge=0.0, allow_inf_nan=False)


class ControlGrid(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    counts: Tuple[int, int, int]
    spacing_mm: Vector3
    origin_mm: Vector3
    coeffs: np.ndarray
    seed: Optional[int] = None

    @field_validator("counts")
    @classmethod
    def _check_counts(cls, value: Tuple[int, int, int]) -> Tuple[int, int, int]:
        if min(value) < 4:
            raise ValueError(f"control grid needs >= 4 points per axis, got {value}")
        return value

    @field_validator("spacing_mm")
    @classmethod
    def _check_spacing(cls, value: Vector3) -> Vector3:
        if not all(math.isfinite(v) and v > 0 for v in value):
            raise ValueError(f"control spacing must be finite and > 0, got {value}")
        return value

    @field_validator("coeffs", mode="before")
    @classmethod
    def _coerce_coeffs(cls, value: Any) -> NDArray[np.float64]:
        arr = np.ascontiguousarray(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("control grid coefficients must be finite")
        return arr

    @model_validator(mode="after")
    def _check_shape(self) -> "ControlGrid":
        if self.coeffs.shape != (*self.counts, 3):
            raise ValueError(
                f"coeffs shape {self.coeffs.shape} does not match counts {self.counts}"
            )
        return self

    @property
    def interior_counts(self) -> Tuple[int, int, int]:
        x, y, z = (c - 2 * GRID_PADDING for c in self.counts)
        return (x, y, z)

    def with_coeffs(self, coeffs: Any) -> "ControlGrid":
        return ControlGrid(
            counts=self.counts,
            spacing_mm=self.spacing_mm,
            origin_mm=self.origin_mm,
            coeffs=coeffs,
            seed=self.seed,
        )


class DisplacementField(BaseModel):
    """Dense per-voxel displacements (mm) on a volume's voxel grid."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    field: np.ndarray
    spacing: Vector3
    origin: Vector3

    @field_validator("field", mode="before")
    @classmethod
    def _coerce_field(cls, value: Any) -> NDArray[np.float64]:
        arr = np.ascontiguousarray(value, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[3] != 3:
            raise ValueError(f"displacement field must be (X, Y, Z, 3), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("displacement field must be finite")
        return arr

    @property
    def shape(self) -> Tuple[int, int, int]:
        x, y, z = self.field.shape[:3]
        return (int(x), int(y), int(z))

    def matches(self, volume: Volume) -> bool:
        return (
            self.shape == volume.shape
            and np.allclose(self.spacing, volume.spacing, rtol=0, atol=1e-9)
            and np.allclose(self.origin, volume.origin, rtol=0, atol=1e-9)
        )


# ---------------------------------------------------------------------------
# Basis
# ---------------------------------------------------------------------------


def bspline_basis(t: Union[float, NDArray[np.float64]]) -> NDArray[np.float64]:
    """Uniform cubic B-spline weights (B0, B1, B2, B3) for t in [0, 1).

    Accepts a scalar or an array; the weights are stacked on a trailing axis.
    """
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(~np.isfinite(t_arr)) or np.any(t_arr < 0.0) or np.any(t_arr >= 1.0):
        raise DomainError(f"B-spline parameter must lie in [0, 1), got {t}")
    t2 = t_arr * t_arr
    t3 = t2 * t_arr
    one_minus = 1.0 - t_arr
    return np.stack(
        [
            one_minus * one_minus * one_minus * BASIS_SCALE,
            (3.0 * t3 - 6.0 * t2 + 4.0) * BASIS_SCALE,
            (-3.0 * t3 + 3.0 * t2 + 3.0 * t_arr + 1.0) * BASIS_SCALE,
            t3 * BASIS_SCALE,
        ],
        axis=-1,
    )


def _axis_support(
    coords_mm: NDArray[np.float64], origin: float, spacing: float, count: int, axis: int
) -> Tuple[NDArray[np.int64], NDArray[np.float64]]:
    """First supporting control index and the 4 basis weights for 1D positions."""
    u = (coords_mm - origin) / spacing
    cell = np.floor(u)
    t = u - cell
    # u slightly below an integer can round t up to exactly 1.0
    wrap = t >= 1.0
    cell[wrap] += 1.0
    t[wrap] = 0.0
    start = cell.astype(np.int64) - 1
    if np.any(start < 0) or np.any(start + 3 > count - 1):
        raise CoverageError(
            f"Geometry along axis {axis} spans u in [{u.min():.3f}, {u.max():.3f}], "
            f"outside the supported range [1, {count - 2}) of the control grid"
        )
    return start, bspline_basis(t)


def _axis_matrix(
    coords_mm: NDArray[np.float64], origin: float, spacing: float, count: int, axis: int
) -> NDArray[np.float64]:
    start, weights = _axis_support(coords_mm, origin, spacing, count, axis)
    matrix = np.zeros((coords_mm.shape[0], count))
    rows = np.arange(coords_mm.shape[0])
    for l in range(4):
        matrix[rows, start + l] += weights[:, l]
    return matrix


def _voxel_axis_coords(geometry: Union[Volume, DisplacementField], axis: int) -> NDArray[np.float64]:
    n = geometry.shape[axis]
    return geometry.origin[axis] + np.arange(n, dtype=np.float64) * geometry.spacing[axis]


# ---------------------------------------------------------------------------
# Grid construction
# ---------------------------------------------------------------------------


def grid_layout(
    geometry: Volume, interior_counts: Sequence[int], isotropic: bool = True
) -> Tuple[Tuple[int, int, int], Vector3, Vector3]:
    """Counts, spacing and origin of a grid with the given interior counts.

    Interior points sit at the centres of ``n`` equal slabs spanning the
    volume's physical extent; with ``isotropic`` the largest slab width is
    used on every axis and the lattice is centred on the volume.
    """
    n = np.asarray([int(c) for c in interior_counts])
    if n.shape != (3,) or np.any(n < 1):
        raise DomainError(f"interior counts must be 3 integers >= 1, got {interior_counts}")
    extent = np.asarray(geometry.shape) * np.asarray(geometry.spacing)
    widths = extent / n
    spacing = np.full(3, widths.max()) if isotropic else widths
    center = np.asarray(geometry.origin) + (np.asarray(geometry.shape) - 1) / 2.0 * np.asarray(
        geometry.spacing
    )
    origin = center - spacing * ((n - 1) / 2.0 + GRID_PADDING)
    counts = n + 2 * GRID_PADDING
    return (
        (int(counts[0]), int(counts[1]), int(counts[2])),
        (float(spacing[0]), float(spacing[1]), float(spacing[2])),
        (float(origin[0]), float(origin[1]), float(origin[2])),
    )


def zero_grid(geometry: Volume, interior_counts: Sequence[int], isotropic: bool = True) -> ControlGrid:
    counts, spacing, origin = grid_layout(geometry, interior_counts, isotropic)
    return ControlGrid(
        counts=counts, spacing_mm=spacing, origin_mm=origin, coeffs=np.zeros((*counts, 3))
    )


def sample_random_grid(spec: DeformationSpec, target_geometry: Volume) -> ControlGrid:
    """Random isotropic misalignment grid, bit-identical for a given seed.

    The interior count is drawn once for all axes from {1..max_points_per_axis};
    interior coefficients are i.i.d. uniform in [-max, +max] mm and the padding
    ring is zero.
    """
    rng = make_rng(spec.seed)
    n = int(rng.integers(1, spec.max_points_per_axis, endpoint=True))
    counts, spacing, origin = grid_layout(target_geometry, (n, n, n), isotropic=True)

    limit = spec.max_displacement_mm
    interior = rng.uniform(-limit, limit, size=(n, n, n, 3))
    # f32-representable so the serialized grid reproduces the field exactly
    interior = np.clip(interior.astype(np.float32).astype(np.float64), -limit, limit)
    coeffs = np.zeros((*counts, 3))
    p = GRID_PADDING
    coeffs[p : p + n, p : p + n, p : p + n, :] = interior
    return ControlGrid(
        counts=counts, spacing_mm=spacing, origin_mm=origin, coeffs=coeffs, seed=spec.seed
    )


# ---------------------------------------------------------------------------
# Field evaluation
# ---------------------------------------------------------------------------


def dense_field(grid: ControlGrid, geometry: Union[Volume, DisplacementField]) -> DisplacementField:
    """Displacement at every voxel centre of ``geometry``.

    Separable evaluation: one sparse-banded basis matrix per axis contracted
    with the coefficient tensor.
    """
    bx, by, bz = (
        _axis_matrix(
            _voxel_axis_coords(geometry, a),
            grid.origin_mm[a],
            grid.spacing_mm[a],
            grid.counts[a],
            a,
        )
        for a in range(3)
    )
    field = np.einsum("xi,yj,zk,ijkc->xyzc", bx, by, bz, grid.coeffs, optimize=True)
    return DisplacementField(field=field, spacing=geometry.spacing, origin=geometry.origin)


def brute_force_field(grid: ControlGrid, geometry: Union[Volume, DisplacementField]) -> DisplacementField:
    """Reference evaluation: naive per-voxel 4x4x4 sum, independent of dense_field."""
    coeffs: List[List[List[List[float]]]] = grid.coeffs.tolist()
    nx, ny, nz = geometry.shape
    out = np.zeros((nx, ny, nz, 3))

    def weights_1d(t: float) -> Tuple[float, float, float, float]:
        s = 1.0 - t
        return (
            s * s * s / 6.0,
            (3.0 * t**3 - 6.0 * t**2 + 4.0) / 6.0,
            (-3.0 * t**3 + 3.0 * t**2 + 3.0 * t + 1.0) / 6.0,
            t**3 / 6.0,
        )

    def locate(index: int, axis: int) -> Tuple[int, Tuple[float, float, float, float]]:
        x = geometry.origin[axis] + index * geometry.spacing[axis]
        u = (x - grid.origin_mm[axis]) / grid.spacing_mm[axis]
        cell = math.floor(u)
        t = u - cell
        if t >= 1.0:
            cell, t = cell + 1, 0.0
        first = cell - 1
        if first < 0 or first + 3 > grid.counts[axis] - 1:
            raise CoverageError(f"Voxel {index} on axis {axis} is outside the grid support")
        return first, weights_1d(t)

    xs = [locate(i, 0) for i in range(nx)]
    ys = [locate(j, 1) for j in range(ny)]
    zs = [locate(k, 2) for k in range(nz)]
    for i in range(nx):
        ix, wx = xs[i]
        for j in range(ny):
            iy, wy = ys[j]
            for k in range(nz):
                iz, wz = zs[k]
                dx = dy = dz = 0.0
                for l in range(4):
                    for m in range(4):
                        wlm = wx[l] * wy[m]
                        for n in range(4):
                            w = wlm * wz[n]
                            c = coeffs[ix + l][iy + m][iz + n]
                            dx += w * c[0]
                            dy += w * c[1]
                            dz += w * c[2]
                out[i, j, k, 0] = dx
                out[i, j, k, 1] = dy
                out[i, j, k, 2] = dz
    return DisplacementField(field=out, spacing=geometry.spacing, origin=geometry.origin)


def point_weights(
    grid: ControlGrid, points_mm: NDArray[np.float64]
) -> Tuple[NDArray[np.int64], NDArray[np.float64]]:
    """Flat coefficient indices and weights (M, 64) supporting each point."""
    points = np.asarray(points_mm, dtype=np.float64).reshape(-1, 3)
    starts: List[NDArray[np.int64]] = []
    weights: List[NDArray[np.float64]] = []
    for a in range(3):
        s, w = _axis_support(points[:, a], grid.origin_mm[a], grid.spacing_mm[a], grid.counts[a], a)
        starts.append(s)
        weights.append(w)
    cx, cy, cz = grid.counts
    flat_idx = np.empty((points.shape[0], 64), dtype=np.int64)
    flat_w = np.empty((points.shape[0], 64))
    for col, (l, m, n) in enumerate(product(range(4), repeat=3)):
        flat_idx[:, col] = ((starts[0] + l) * cy + (starts[1] + m)) * cz + (starts[2] + n)
        flat_w[:, col] = weights[0][:, l] * weights[1][:, m] * weights[2][:, n]
    return flat_idx, flat_w


def evaluate_at(grid: ControlGrid, points_mm: NDArray[np.float64]) -> NDArray[np.float64]:
    """Displacements (M, 3) at arbitrary world points."""
    flat_idx, flat_w = point_weights(grid, points_mm)
    flat_coeffs = grid.coeffs.reshape(-1, 3)
    return np.einsum("mk,mkc->mc", flat_w, flat_coeffs[flat_idx])


def magnitude_map(field: DisplacementField) -> Volume:
    """Per-voxel Euclidean norm of the displacement, as an ERROR volume (mm)."""
    magnitude = np.sqrt(np.sum(field.field * field.field, axis=-1))
    return Volume(
        data=magnitude, spacing=field.spacing, origin=field.origin, modality=Modality.ERROR
    )


def warp_volume(volume: Volume, field: DisplacementField) -> Volume:
    """Backward warp: ``out(x) = volume(x + d(x))`` with zeros outside bounds."""
    if not field.matches(volume):
        raise GeometryMismatchError(
            f"Field geometry {field.shape} @ {field.spacing}/{field.origin} does not match "
            f"volume {volume.shape} @ {volume.spacing}/{volume.origin}"
        )
    index_grid = np.stack(np.meshgrid(*[np.arange(n) for n in volume.shape], indexing="ij"))
    coords = index_grid + np.moveaxis(field.field, -1, 0) / np.asarray(volume.spacing).reshape(
        3, 1, 1, 1
    )
    return volume.with_data(trilinear_sample(volume.data, coords, bounds="strict"))


# ---------------------------------------------------------------------------
# Landmark fit
# ---------------------------------------------------------------------------


def design_matrix(grid: ControlGrid, points_mm: NDArray[np.float64]) -> NDArray[np.float64]:
    """Dense (M, Kx*Ky*Kz) matrix of B-spline weights at the given points."""
    flat_idx, flat_w = point_weights(grid, points_mm)
    matrix = np.zeros((flat_idx.shape[0], int(np.prod(grid.counts))))
    rows = np.repeat(np.arange(flat_idx.shape[0]), 64)
    np.add.at(matrix, (rows, flat_idx.ravel()), flat_w.ravel())
    return matrix


def fit_landmark_bspline(
    pairs: LandmarkPairs,
    geometry: Volume,
    interior_counts: Sequence[int] = (6, 6, 6),
    ridge: float = 1e-6,
    template: Optional[ControlGrid] = None,
) -> ControlGrid:
    """Ridge-regularized least-squares B-spline through landmark displacements.

    Minimizes ``sum_k |D(p_k; c) - t_k|^2 + ridge * |c|^2`` independently per
    axis, with p_k the fixed positions and t_k = moving_k - fixed_k. Solved
    in the dual form ``c = A^T (A A^T + ridge I)^-1 t``, which equals the
    primal minimizer and stays small for few landmarks. ``template`` reuses
    an existing grid layout.
    """
    if len(pairs) == 0:
        raise EmptyPairsError("Landmark B-spline fit needs at least one pair")
    if ridge < 0 or not math.isfinite(ridge):
        raise DomainError(f"ridge must be >= 0, got {ridge}")
    fixed = pairs.fixed_positions()
    outside = ~geometry.contains(fixed)
    if np.any(outside):
        bad = [p.id for p, o in zip(pairs.pairs, outside) if o]
        raise OutOfExtentError(f"Fixed landmarks outside the geometry: {', '.join(bad)}")

    if template is not None:
        grid = template.with_coeffs(np.zeros_like(template.coeffs))
    else:
        grid = zero_grid(geometry, interior_counts, isotropic=False)

    targets = pairs.moving_positions() - fixed
    a = design_matrix(grid, fixed)
    gram = a @ a.T + ridge * np.eye(a.shape[0])
    try:
        alpha = linalg.solve(gram, targets, assume_a="pos")
    except (linalg.LinAlgError, ValueError):
        logger.warning("Landmark Gram matrix is singular; falling back to least squares")
        alpha = linalg.lstsq(gram, targets)[0]
    coeffs = (a.T @ alpha).reshape(*grid.counts, 3)
    return grid.with_coeffs(coeffs)


def fit_residual(grid: ControlGrid, pairs: LandmarkPairs) -> float:
    """Sum of squared landmark residuals of a fitted grid (mm^2)."""
    fixed = pairs.fixed_positions()
    residual = evaluate_at(grid, fixed) - (pairs.moving_positions() - fixed)
    return float(np.sum(residual * residual))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def save_grid(grid: ControlGrid, path: Union[str, Path]) -> Path:
    """Write JSON metadata plus a little-endian f32 coefficient payload."""
    header_path, payload_path = raw_json_paths(Path(path))
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "counts": list(grid.counts),
        "spacing_mm": list(grid.spacing_mm),
        "origin_mm": list(grid.origin_mm),
        "seed": grid.seed,
        "padding": GRID_PADDING,
        "order": "x-fastest, components interleaved",
    }
    with open(header_path, "w", encoding="utf-8") as f:
        json.dump(header, f, indent=2)
    np.moveaxis(grid.coeffs, -1, 0).reshape(-1, order="F").astype("<f4").tofile(payload_path)
    return header_path


def load_grid(path: Union[str, Path]) -> ControlGrid:
    header_path, payload_path = raw_json_paths(Path(path))
    if not header_path.exists():
        raise FileNotFoundError(f"Grid header not found: {header_path}")
    try:
        with open(header_path, "r", encoding="utf-8") as f:
            header = json.load(f)
        counts = tuple(int(c) for c in header["counts"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise FormatError(f"Malformed grid header {header_path}: {e}") from e
    flat = np.fromfile(payload_path, dtype="<f4")
    if flat.size != int(np.prod(counts)) * 3:
        raise FormatError(f"Grid payload {payload_path} has {flat.size} values, expected {np.prod(counts) * 3}")
    coeffs = np.moveaxis(flat.reshape([3, *counts], order="F"), 0, -1)
    return ControlGrid(
        counts=counts,  # type: ignore[arg-type]
        spacing_mm=tuple(header["spacing_mm"]),
        origin_mm=tuple(header["origin_mm"]),
        coeffs=coeffs,
        seed=header.get("seed"),
    )


def save_field(field: DisplacementField, path: Union[str, Path]) -> Path:
    return write_raw_json(Path(path), field.field, field.spacing, field.origin, Modality.OTHER)


def load_field(path: Union[str, Path]) -> DisplacementField:
    header, array = read_raw_json(Path(path))
    if array.ndim != 4 or array.shape[3] != 3:
        raise FormatError(f"{path} is not a 3-component displacement field")
    return DisplacementField(field=array, spacing=header["spacing"], origin=header["origin"])
