"""Procedurally generated MRI/iUS cases for tests and desk-scale experiments.

Every subject shares the same anatomy template (an ellipsoidal brain with
ventricles) and differs in the position of bright inclusions, which double
as landmarks. The iUS volume is an edge-emphasizing remap of the same
anatomy with multiplicative speckle, zero outside a fan-shaped FOV.
"""

import logging
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from .dataset import CaseDescriptor, save_case_descriptor
from .utils import hash64, make_rng
from .volume import (
    Landmark,
    LandmarkSet,
    Modality,
    Volume,
    save_landmarks,
    save_volume,
)

logger = logging.getLogger(__name__)

# Fan apex sits just above the top face; half-angle in radians.
_FOV_APEX = np.array([0.0, 0.0, 1.1])
_FOV_HALF_ANGLE = np.deg2rad(40.0)
_INCLUSION_RADIUS = 0.45


def _normalized_grid(size: int) -> NDArray[np.float64]:
    axis = (np.arange(size, dtype=np.float64) + 0.5) / size * 2.0 - 1.0
    return np.stack(np.meshgrid(axis, axis, axis, indexing="ij"))


def _soft_inside(distance: NDArray[np.float64], sharpness: float = 25.0) -> NDArray[np.float64]:
    """Smooth indicator of ``distance < 1``."""
    return 1.0 / (1.0 + np.exp(np.clip(sharpness * (distance - 1.0), -60.0, 60.0)))


def _fov_mask(grid: NDArray[np.float64]) -> NDArray[np.bool_]:
    rel = grid - _FOV_APEX.reshape(3, 1, 1, 1)
    depth = -rel[2]
    lateral = np.sqrt(rel[0] ** 2 + rel[1] ** 2)
    return (depth > 0.15) & (lateral <= np.tan(_FOV_HALF_ANGLE) * depth)


def _inclusion_centers(rng: np.random.Generator, count: int) -> NDArray[np.float64]:
    """Uniform points inside a central ball, kept apart from each other."""
    centers: List[NDArray[np.float64]] = []
    attempts = 0
    while len(centers) < count:
        attempts += 1
        p = rng.uniform(-_INCLUSION_RADIUS, _INCLUSION_RADIUS, size=3)
        if np.linalg.norm(p) > _INCLUSION_RADIUS:
            continue
        min_gap = 0.12 if attempts < 10_000 else 0.0
        if all(np.linalg.norm(p - c) >= min_gap for c in centers):
            centers.append(p)
    return np.asarray(centers).reshape(-1, 3)


def make_synthetic_case(
    patient_id: str,
    size: int = 96,
    spacing: float = 1.0,
    n_landmarks: int = 15,
    seed: int = 0,
) -> Tuple[Volume, Volume, LandmarkSet]:
    """Co-registered MRI/iUS pair and inclusion-centre landmarks.

    Deterministic in ``(patient_id, seed)``.
    """
    rng = make_rng(hash64(seed, patient_id))
    grid = _normalized_grid(size)
    x, y, z = grid

    brain = _soft_inside(np.sqrt((x / 0.85) ** 2 + (y / 0.75) ** 2 + (z / 0.8) ** 2))
    ventricles = _soft_inside(
        np.sqrt(((np.abs(x) - 0.15) / 0.08) ** 2 + (y / 0.3) ** 2 + ((z - 0.05) / 0.12) ** 2), 6.0
    )
    texture = ndimage.gaussian_filter(rng.standard_normal((size, size, size)), sigma=size / 24.0)
    texture /= np.abs(texture).max() + 1e-12

    centers = _inclusion_centers(rng, n_landmarks)
    radii = rng.uniform(0.05, 0.09, size=n_landmarks)
    inclusions = np.zeros_like(x)
    for c, r in zip(centers, radii):
        d2 = (x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2
        inclusions += np.exp(-d2 / (2.0 * r * r))

    mri = 0.55 * brain - 0.35 * ventricles * brain + 0.08 * texture * brain + 0.5 * inclusions
    mri = np.clip(mri, 0.0, None)

    edges = ndimage.gaussian_gradient_magnitude(mri, sigma=1.0)
    edges /= edges.max() + 1e-12
    speckle = rng.rayleigh(scale=np.sqrt(2.0 / np.pi), size=mri.shape)
    ius = (0.6 * edges + 0.4 * mri**2) * speckle
    ius[~_fov_mask(grid)] = 0.0

    origin = (0.0, 0.0, 0.0)
    step = (spacing, spacing, spacing)
    mri_vol = Volume(data=mri, spacing=step, origin=origin, modality=Modality.MRI)
    ius_vol = Volume(data=ius, spacing=step, origin=origin, modality=Modality.IUS)

    # normalized coordinate -> voxel index -> world
    voxel = (centers + 1.0) / 2.0 * size - 0.5
    world = mri_vol.voxel_to_world(voxel)
    landmarks = LandmarkSet(
        entries=[Landmark(id=f"L{i + 1:02d}", position=tuple(p)) for i, p in enumerate(world)]
    )
    return mri_vol, ius_vol, landmarks


def write_synthetic_cohort(
    out_dir: Union[str, Path],
    n_subjects: int = 8,
    size: int = 96,
    n_landmarks: int = 15,
    seed: int = 0,
    spacing: float = 1.0,
) -> List[Path]:
    """Write ``S01..Snn`` subject folders and return their case descriptor paths."""
    out = Path(out_dir)
    descriptors: List[Path] = []
    for i in range(n_subjects):
        pid = f"S{i + 1:02d}"
        case_dir = out / pid
        mri, ius, landmarks = make_synthetic_case(pid, size, spacing, n_landmarks, seed)
        save_volume(mri, case_dir / "mri")
        save_volume(ius, case_dir / "ius")
        save_landmarks(landmarks, case_dir / "landmarks.csv")
        descriptor = CaseDescriptor(
            patient_id=pid,
            mri=Path("mri.json"),
            ius=Path("ius.json"),
            landmarks=Path("landmarks.csv"),
        )
        descriptors.append(save_case_descriptor(descriptor, case_dir / "case.json"))
        logger.info("wrote synthetic case %s", pid)
    return descriptors
