#!/usr/bin/env python3
"""Tests for volumes, resampling, cropping and landmark files."""

import json

import numpy as np
import numpy.testing as npt
import pytest

from regerr.errors import (
    DegenerateVolumeError,
    DuplicateIdError,
    FormatError,
    NoOverlapError,
    UnsupportedFormatError,
)
from regerr.volume import (
    Landmark,
    LandmarkPair,
    LandmarkPairs,
    LandmarkSet,
    Modality,
    Volume,
    crop_to_fov,
    infer_format,
    load_landmark_pairs,
    load_landmarks,
    load_volume,
    resample_isotropic,
    resample_to_geometry,
    save_landmark_pairs,
    save_landmarks,
    save_volume,
)
from test.conftest import make_volume


def write_pair(tmp_path, dims, values, spacing=(1, 1, 1), origin=(0, 0, 0)):
    header = {"dims": list(dims), "spacing": list(spacing), "origin": list(origin)}
    (tmp_path / "vol.json").write_text(json.dumps(header), encoding="utf-8")
    np.asarray(values, dtype="<f4").tofile(tmp_path / "vol.raw")
    return tmp_path / "vol.json"


class TestVolumeGeometry:
    def test_voxel_world_round_trip(self):
        volume = make_volume((5, 6, 7), spacing=(0.5, 1.0, 2.0), origin=(-3.0, 4.0, 10.0))
        idx = np.array([[0, 0, 0], [4, 5, 6], [2, 3, 1]])
        npt.assert_allclose(volume.world_to_voxel(volume.voxel_to_world(idx)), idx, atol=1e-12)

    def test_contains_uses_voxel_centres(self):
        volume = make_volume((4, 4, 4))
        assert volume.contains([3.0, 0.0, 1.5])
        assert not volume.contains([3.5, 0.0, 0.0])

    def test_rejects_non_positive_spacing(self):
        with pytest.raises(ValueError):
            Volume(data=np.zeros((2, 2, 2)), spacing=(1.0, 0.0, 1.0))

    def test_rejects_non_3d_data(self):
        with pytest.raises(ValueError):
            Volume(data=np.zeros((2, 2)))


class TestRawJson:
    def test_load_small_volume(self, tmp_path):
        path = write_pair(tmp_path, (2, 2, 2), np.arange(8))
        volume = load_volume(path)
        assert volume.shape == (2, 2, 2)
        assert volume.spacing == (1.0, 1.0, 1.0)
        # x-fastest order
        assert volume.data[1, 0, 0] == 1.0
        assert volume.data[0, 1, 0] == 2.0
        assert volume.data[0, 0, 1] == 4.0

    def test_payload_size_mismatch(self, tmp_path):
        path = write_pair(tmp_path, (2, 2, 2), np.arange(7))
        with pytest.raises(FormatError):
            load_volume(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_volume(tmp_path / "absent.json")

    def test_save_load_preserves_geometry(self, tmp_path):
        volume = make_volume((3, 4, 5), spacing=(0.5, 0.5, 0.5), origin=(1.0, 2.0, 3.0), modality=Modality.IUS)
        loaded = load_volume(save_volume(volume, tmp_path / "ius"))
        assert loaded.same_geometry(volume)
        assert loaded.modality == Modality.IUS
        npt.assert_array_equal(loaded.data, volume.data)

    def test_unknown_extension(self, tmp_path):
        with pytest.raises(UnsupportedFormatError):
            infer_format(tmp_path / "volume.mha")

    def test_nifti_round_trip(self, tmp_path):
        nib = pytest.importorskip("nibabel")
        data = np.random.default_rng(0).random((4, 5, 6)).astype(np.float32)
        affine = np.diag([0.5, 0.5, 0.5, 1.0])
        affine[:3, 3] = [10.0, -2.0, 3.0]
        nib.save(nib.Nifti1Image(data, affine), str(tmp_path / "vol.nii.gz"))
        volume = load_volume(tmp_path / "vol.nii.gz", modality=Modality.MRI)
        assert volume.spacing == (0.5, 0.5, 0.5)
        assert volume.origin == (10.0, -2.0, 3.0)
        npt.assert_allclose(volume.data, data)


class TestResampling:
    def test_identity_resample(self):
        volume = make_volume((6, 6, 6))
        out = resample_isotropic(volume, 1.0)
        assert out.same_geometry(volume)
        npt.assert_allclose(out.data, volume.data, atol=1e-6)

    def test_constant_volume_stays_constant(self):
        volume = make_volume((5, 7, 4), spacing=(1.0, 0.8, 1.2), fill=2.5)
        out = resample_isotropic(volume, 0.2)
        npt.assert_allclose(out.data, 2.5, atol=1e-6)

    def test_non_dividing_spacing_keeps_trailing_slabs(self):
        out = resample_isotropic(make_volume((3, 3, 3), fill=2.5), 0.7)
        assert out.shape == (5, 5, 5)
        npt.assert_allclose(out.data, 2.5, atol=1e-6)

    def test_non_dividing_ramp_replicates_last_value(self):
        out = resample_isotropic(make_volume((4, 2, 2)), 0.7)
        assert out.shape == (6, 3, 3)
        assert out.data[-1, 0, 0] == pytest.approx(3.0)
        assert np.all(np.diff(out.data[:, 0, 0]) >= 0)

    def test_linear_ramp_matches_analytic_values(self):
        volume = make_volume((8, 4, 4))
        out = resample_isotropic(volume, 0.5)
        assert out.spacing == (0.5, 0.5, 0.5)
        assert out.shape == (16, 8, 8)
        x_mm = out.voxel_to_world(np.stack([np.arange(16), np.zeros(16), np.zeros(16)], axis=1))[:, 0]
        expected = np.clip(x_mm, 0.0, 7.0)
        npt.assert_allclose(out.data[:, 0, 0], expected, atol=1e-6)

    def test_single_voxel_axis_is_degenerate(self):
        with pytest.raises(DegenerateVolumeError):
            resample_isotropic(make_volume((4, 4, 1)), 0.5)

    def test_resample_to_geometry_shift(self):
        volume = make_volume((8, 2, 2))
        reference = make_volume((8, 2, 2), origin=(1.0, 0.0, 0.0))
        out = resample_to_geometry(volume, reference)
        assert out.same_geometry(reference)
        npt.assert_allclose(out.data[:7, 0, 0], np.arange(1, 8))
        assert out.data[7, 0, 0] == 0.0


class TestCropToFov:
    def test_full_coverage_keeps_target(self):
        target = make_volume((6, 6, 6))
        reference = make_volume((6, 6, 6), fill=1.0)
        assert crop_to_fov(reference, target).same_geometry(target)

    def test_central_cube(self):
        target = make_volume((30, 30, 30))
        data = np.zeros((30, 30, 30), dtype=np.float32)
        data[10:20, 10:20, 10:20] = 1.0
        cropped = crop_to_fov(target.with_data(data), target)
        assert cropped.shape == (10, 10, 10)
        assert cropped.origin == (10.0, 10.0, 10.0)

    def test_margin_extends_crop(self):
        target = make_volume((30, 30, 30))
        data = np.zeros((30, 30, 30), dtype=np.float32)
        data[10:20, 10:20, 10:20] = 1.0
        cropped = crop_to_fov(target.with_data(data), target, margin_mm=2.0)
        assert cropped.shape == (14, 14, 14)

    def test_disjoint_volumes(self):
        target = make_volume((4, 4, 4))
        reference = make_volume((4, 4, 4), origin=(100.0, 0.0, 0.0), fill=1.0)
        with pytest.raises(NoOverlapError):
            crop_to_fov(reference, target)

    def test_empty_reference(self):
        with pytest.raises(NoOverlapError):
            crop_to_fov(make_volume((4, 4, 4), fill=0.0), make_volume((4, 4, 4)))


class TestLandmarks:
    def test_two_rows(self, tmp_path):
        path = tmp_path / "lm.csv"
        path.write_text("id,x_mm,y_mm,z_mm\nA,1,2,3\nB,4.5,5,6\n", encoding="utf-8")
        landmarks = load_landmarks(path)
        assert len(landmarks) == 2
        assert landmarks.entries[1].position == (4.5, 5.0, 6.0)

    def test_repeated_id(self, tmp_path):
        path = tmp_path / "lm.csv"
        path.write_text("id,x_mm,y_mm,z_mm\nA,1,2,3\nA,4,5,6\n", encoding="utf-8")
        with pytest.raises(DuplicateIdError):
            load_landmarks(path)

    def test_wrong_header(self, tmp_path):
        path = tmp_path / "lm.csv"
        path.write_text("name,x,y,z\nA,1,2,3\n", encoding="utf-8")
        with pytest.raises(FormatError):
            load_landmarks(path)

    def test_fifteen_landmarks_round_trip(self, tmp_path):
        landmarks = LandmarkSet(
            entries=[Landmark(id=f"L{i:02d}", position=(i * 0.1, i * 0.2, -i * 0.3)) for i in range(15)]
        )
        loaded = load_landmarks(save_landmarks(landmarks, tmp_path / "lm.csv"))
        assert loaded == landmarks

    def test_pairs_round_trip(self, tmp_path):
        pairs = LandmarkPairs(
            pairs=[LandmarkPair(id="P1", fixed_position=(1.0, 2.0, 3.0), moving_position=(1.5, 2.0, 2.0))]
        )
        loaded = load_landmark_pairs(save_landmark_pairs(pairs, tmp_path / "pairs.csv"))
        assert loaded == pairs
        npt.assert_allclose(loaded.pairs[0].displacement, [0.5, 0.0, -1.0])
