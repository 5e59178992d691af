"""Pytest configuration and shared fixtures."""

from pathlib import Path
from typing import List

import numpy as np
import pytest

from regerr.dataset import PatchRecord
from regerr.volume import Landmark, LandmarkSet, Modality, Volume


def make_volume(shape=(8, 8, 8), spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), fill=None, modality=Modality.OTHER):
    """Volume with a deterministic payload (x-ramp unless ``fill`` is given)."""
    if fill is None:
        data = np.broadcast_to(np.arange(shape[0], dtype=np.float32)[:, None, None], shape).copy()
    else:
        data = np.full(shape, fill, dtype=np.float32)
    return Volume(data=data, spacing=spacing, origin=origin, modality=modality)


def make_record(patient_id="S01", landmark_id="L01", deformation_index=0, size=32, error=1.0, seed=0):
    rng = np.random.default_rng(seed)
    return PatchRecord(
        mri_patch=rng.random((size, size, size), dtype=np.float32),
        ius_patch=rng.random((size, size, size), dtype=np.float32),
        error_patch=np.full((size, size, size), error, dtype=np.float32),
        patient_id=patient_id,
        landmark_id=landmark_id,
        deformation_index=deformation_index,
    )


@pytest.fixture
def ramp_volume() -> Volume:
    return make_volume((16, 16, 16))


@pytest.fixture
def center_landmarks() -> LandmarkSet:
    return LandmarkSet(entries=[Landmark(id="L01", position=(20.0, 20.0, 20.0))])


@pytest.fixture
def toy_records() -> List[PatchRecord]:
    return [make_record(landmark_id=f"L{i:02d}", error=0.5 + 0.25 * i, seed=i) for i in range(4)]


@pytest.fixture(scope="session")
def synthetic_cohort(tmp_path_factory) -> List[Path]:
    """Three small synthetic cases written as raw_json + CSV descriptors."""
    from regerr.synthetic import write_synthetic_cohort

    out = tmp_path_factory.mktemp("cohort")
    return write_synthetic_cohort(out, n_subjects=3, size=40, n_landmarks=4, seed=1)


@pytest.fixture(scope="session")
def small_dataset(synthetic_cohort, tmp_path_factory) -> Path:
    """Patch dataset (P=32, 2 deformations per case) built from the synthetic cohort."""
    from regerr.dataset import build_dataset, load_case_descriptor
    from regerr.ffd import DeformationSpec

    out = tmp_path_factory.mktemp("dataset")
    build_dataset(
        [load_case_descriptor(p) for p in synthetic_cohort],
        DeformationSpec(seed=5, max_points_per_axis=6, max_displacement_mm=4.0),
        patch_size=32,
        out_dir=out,
        n_deformations=2,
        target_spacing_mm=None,
    )
    return out
