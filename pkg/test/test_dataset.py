#!/usr/bin/env python3
"""Tests for simulation, patch extraction, patch records and splits."""

from pathlib import Path

import numpy as np
import numpy.testing as npt
import pytest

from regerr.dataset import (
    PATCH_HEADER_SIZE,
    CaseDescriptor,
    PatchRecord,
    build_dataset,
    check_patch_size,
    deformation_seed,
    extract_patches,
    load_case_descriptor,
    load_entry_record,
    make_split,
    normalize_patch,
    prepare_case,
    read_patch_record,
    save_case_descriptor,
    simulate_case,
    split_counts,
    with_split,
    write_patch_record,
)
from regerr.errors import (
    ConfigError,
    DataError,
    DuplicateIdError,
    FormatError,
    GeometryMismatchError,
    TooFewPatientsError,
)
from regerr.ffd import DeformationSpec
from regerr.manifest import load_manifest, manifest_hash
from regerr.volume import Landmark, LandmarkSet, Modality
from test.conftest import make_record, make_volume


@pytest.fixture
def cube():
    """64^3 MRI / iUS / error triple on a shared 1 mm grid."""
    rng = np.random.default_rng(0)
    mri = make_volume((64, 64, 64), modality=Modality.MRI)
    ius = mri.with_data(rng.random((64, 64, 64)), modality=Modality.IUS)
    error = mri.with_data(np.full((64, 64, 64), 2.0), modality=Modality.ERROR)
    return mri, ius, error


class TestPatchSize:
    @pytest.mark.parametrize("size", [32, 64, 96])
    def test_multiples_of_32(self, size):
        check_patch_size(size)

    @pytest.mark.parametrize("size", [0, 16, 48, 65])
    def test_rejected(self, size):
        with pytest.raises(ConfigError):
            check_patch_size(size)


class TestExtractPatches:
    def test_centred_window(self, cube):
        mri, ius, error = cube
        landmarks = LandmarkSet(entries=[Landmark(id="L01", position=(32.0, 32.0, 32.0))])
        (record,) = extract_patches(mri, ius, error, landmarks, patch_size=32, patient_id="S01")
        assert record.window_start == (16, 16, 16)
        assert record.patch_origin_mm == (16.0, 16.0, 16.0)
        assert record.patch_size == 32
        assert record.record_id == "S01_L01_0"

    def test_window_clamped_at_border(self, cube):
        mri, ius, error = cube
        landmarks = LandmarkSet(entries=[Landmark(id="L01", position=(2.0, 2.0, 60.0))])
        (record,) = extract_patches(mri, ius, error, landmarks, patch_size=32)
        assert record.window_start == (0, 0, 32)

    def test_intensities_normalized_and_error_untouched(self, cube):
        mri, ius, error = cube
        landmarks = LandmarkSet(entries=[Landmark(id="L01", position=(32.0, 32.0, 32.0))])
        (record,) = extract_patches(mri, ius, error, landmarks, patch_size=32)
        for patch in (record.mri_patch, record.ius_patch):
            assert patch.min() == pytest.approx(0.0)
            assert patch.max() == pytest.approx(1.0)
        npt.assert_array_equal(record.error_patch, 2.0)

    def test_landmark_outside_is_skipped(self, cube):
        mri, ius, error = cube
        landmarks = LandmarkSet(
            entries=[
                Landmark(id="L01", position=(32.0, 32.0, 32.0)),
                Landmark(id="L02", position=(-5.0, 32.0, 32.0)),
            ]
        )
        records = extract_patches(mri, ius, error, landmarks, patch_size=32)
        assert [r.landmark_id for r in records] == ["L01"]

    def test_volume_smaller_than_patch(self):
        small = make_volume((20, 20, 20))
        landmarks = LandmarkSet(entries=[Landmark(id="L01", position=(10.0, 10.0, 10.0))])
        assert extract_patches(small, small, small, landmarks, patch_size=32) == []

    def test_geometry_mismatch(self, cube):
        mri, ius, _ = cube
        with pytest.raises(GeometryMismatchError):
            extract_patches(mri, ius, make_volume((32, 32, 32)), LandmarkSet(), patch_size=32)

    def test_constant_patch_normalizes_to_zero(self):
        npt.assert_array_equal(normalize_patch(np.full((4, 4, 4), 7.0, dtype=np.float32)), 0.0)


class TestPatchRecordFile:
    def test_round_trip(self, tmp_path):
        record = make_record(size=32, error=1.5, seed=3)
        offsets = write_patch_record(record, tmp_path / "r.pr")
        assert offsets[0] == PATCH_HEADER_SIZE
        assert (tmp_path / "r.pr").stat().st_size == PATCH_HEADER_SIZE + 3 * 32**3 * 4
        loaded = read_patch_record(tmp_path / "r.pr")
        npt.assert_array_equal(loaded.mri_patch, record.mri_patch)
        npt.assert_array_equal(loaded.ius_patch, record.ius_patch)
        npt.assert_array_equal(loaded.error_patch, record.error_patch)

    def test_header_carries_seed_and_deformation(self, tmp_path):
        record = make_record(deformation_index=7).model_copy(update={"seed": 2**63 + 5})
        write_patch_record(record, tmp_path / "r.pr")
        loaded = read_patch_record(tmp_path / "r.pr")
        assert loaded.deformation_index == 7
        assert loaded.seed == 2**63 + 5

    def test_bad_magic(self, tmp_path):
        write_patch_record(make_record(), tmp_path / "r.pr")
        blob = bytearray((tmp_path / "r.pr").read_bytes())
        blob[:4] = b"XXXX"
        (tmp_path / "r.pr").write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            read_patch_record(tmp_path / "r.pr")

    def test_truncated(self, tmp_path):
        write_patch_record(make_record(), tmp_path / "r.pr")
        blob = (tmp_path / "r.pr").read_bytes()
        (tmp_path / "r.pr").write_bytes(blob[:-100])
        with pytest.raises(FormatError):
            read_patch_record(tmp_path / "r.pr")

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_patch_record(tmp_path / "absent.pr")

    def test_negative_error_rejected(self):
        with pytest.raises(ValueError):
            PatchRecord(
                mri_patch=np.zeros((4, 4, 4)),
                ius_patch=np.zeros((4, 4, 4)),
                error_patch=np.full((4, 4, 4), -1.0),
            )

    def test_mismatched_patch_shapes_rejected(self):
        with pytest.raises(ValueError):
            PatchRecord(
                mri_patch=np.zeros((4, 4, 4)),
                ius_patch=np.zeros((8, 8, 8)),
                error_patch=np.zeros((4, 4, 4)),
            )

    def test_deformation_index_within_count(self):
        record = PatchRecord(
            mri_patch=np.zeros((4, 4, 4)),
            ius_patch=np.zeros((4, 4, 4)),
            error_patch=np.zeros((4, 4, 4)),
            deformation_index=1,
            n_deformations=2,
        )
        assert record.deformation_index == 1

    @pytest.mark.parametrize("k, n", [(2, 2), (-1, None), (0, 0)])
    def test_deformation_index_out_of_range_rejected(self, k, n):
        with pytest.raises(ValueError):
            PatchRecord(
                mri_patch=np.zeros((4, 4, 4)),
                ius_patch=np.zeros((4, 4, 4)),
                error_patch=np.zeros((4, 4, 4)),
                deformation_index=k,
                n_deformations=n,
            )


class TestSplits:
    @pytest.mark.parametrize(
        "n, expected",
        [(22, (13, 4, 5)), (5, (3, 1, 1)), (3, (1, 1, 1)), (10, (6, 2, 2))],
    )
    def test_counts(self, n, expected):
        assert split_counts(n) == expected

    def test_too_few_patients(self):
        with pytest.raises(TooFewPatientsError):
            split_counts(2)

    def test_split_is_a_partition(self):
        patients = [f"P{i:02d}" for i in range(22)]
        split = make_split(patients, seed=4)
        assert set(split.assignment) == set(patients)
        assert split.counts() == {"train": 13, "val": 4, "test": 5}

    def test_split_is_deterministic(self):
        patients = [f"P{i:02d}" for i in range(22)]
        assert make_split(patients, seed=4) == make_split(list(reversed(patients)), seed=4)
        assert make_split(patients, seed=4) != make_split(patients, seed=5)

    def test_bad_fractions(self):
        with pytest.raises(ConfigError):
            make_split(["a", "b", "c"], fractions=(0.5, 0.5, 0.5))

    def test_duplicate_patients(self):
        with pytest.raises(DuplicateIdError):
            make_split(["a", "a", "b"])

    def test_partition_holds_for_many_seeds(self):
        patients = [f"P{i:02d}" for i in range(22)]
        for seed in range(1000):
            split = make_split(patients, seed=seed)
            groups = [set(split.patients(name)) for name in ("train", "val", "test")]
            assert [len(g) for g in groups] == [13, 4, 5]
            assert groups[0] | groups[1] | groups[2] == set(patients)
            assert not (groups[0] & groups[1] or groups[0] & groups[2] or groups[1] & groups[2])


class TestSimulation:
    def test_zero_displacement_leaves_ius_unchanged(self):
        mri = make_volume((12, 12, 12))
        ius = mri.with_data(np.random.default_rng(2).random((12, 12, 12)))
        spec = DeformationSpec(seed=1, max_displacement_mm=0.0)
        (deformation,) = simulate_case(mri, ius, LandmarkSet(), spec, n_deformations=1, patient_id="S01")
        assert not np.any(deformation.error.data)
        npt.assert_allclose(deformation.warped_ius.data, ius.data, atol=1e-6)

    def test_deformations_use_derived_seeds(self):
        mri = make_volume((12, 12, 12))
        spec = DeformationSpec(seed=9, max_points_per_axis=4)
        deformations = simulate_case(mri, mri, LandmarkSet(), spec, n_deformations=3, patient_id="S02")
        assert [d.seed for d in deformations] == [deformation_seed(9, "S02", k) for k in range(3)]
        assert len({d.seed for d in deformations}) == 3

    def test_stats_over_fov(self):
        mri = make_volume((12, 12, 12))
        spec = DeformationSpec(seed=3, max_points_per_axis=4, max_displacement_mm=2.0)
        (deformation,) = simulate_case(mri, mri, LandmarkSet(), spec, n_deformations=1, patient_id="S01")
        stats = deformation.stats("S01")
        assert 0.0 <= stats.mean_error_mm <= stats.max_error_mm
        assert stats.max_error_mm == pytest.approx(float(deformation.error.data.max()))

    def test_geometry_must_match(self):
        with pytest.raises(GeometryMismatchError):
            simulate_case(make_volume((8, 8, 8)), make_volume((9, 8, 8)), LandmarkSet(), DeformationSpec())

    def test_needs_one_deformation(self):
        mri = make_volume((8, 8, 8))
        with pytest.raises(ConfigError):
            simulate_case(mri, mri, LandmarkSet(), DeformationSpec(), n_deformations=0)


class TestCaseDescriptor:
    def test_relative_paths_resolve_against_descriptor(self, tmp_path):
        descriptor = CaseDescriptor(
            patient_id="S01", mri=Path("mri.json"), ius=Path("ius.json"), landmarks=Path("lm.csv")
        )
        loaded = load_case_descriptor(save_case_descriptor(descriptor, tmp_path / "S01" / "case.json"))
        assert loaded.mri == tmp_path / "S01" / "mri.json"
        assert loaded.landmark_pairs is None

    def test_invalid_descriptor(self, tmp_path):
        (tmp_path / "case.json").write_text('{"patient_id": "S01"}', encoding="utf-8")
        with pytest.raises(FormatError):
            load_case_descriptor(tmp_path / "case.json")

    def test_prepare_case_shares_geometry(self, synthetic_cohort):
        mri, ius, landmarks = prepare_case(load_case_descriptor(synthetic_cohort[0]), target_spacing_mm=None)
        assert mri.same_geometry(ius)
        assert len(landmarks) == 4
        assert mri.modality == Modality.MRI

    def test_missing_volume_names_the_case(self, tmp_path):
        descriptor = CaseDescriptor(
            patient_id="S99",
            mri=tmp_path / "absent.json",
            ius=tmp_path / "absent.json",
            landmarks=tmp_path / "lm.csv",
        )
        with pytest.raises(FileNotFoundError, match="S99"):
            prepare_case(descriptor)


class TestBuildDataset:
    def test_record_counts(self, small_dataset):
        manifest = load_manifest(small_dataset)
        # 3 cases x 4 landmarks x 2 deformations
        assert len(manifest.records) == 24
        assert len(manifest.deformations) == 6
        assert manifest.split is not None
        assert manifest.split.counts() == {"train": 1, "val": 1, "test": 1}

    def test_records_are_readable(self, small_dataset):
        manifest = load_manifest(small_dataset)
        entry = manifest.records[0]
        record = load_entry_record(small_dataset, entry)
        assert record.patient_id == entry.patient_id
        assert record.patch_size == 32
        assert float(record.error_patch.max()) == pytest.approx(entry.max_error_mm)
        assert (small_dataset / entry.grid_file).exists()

    def test_records_sorted(self, small_dataset):
        manifest = load_manifest(small_dataset)
        keys = [(r.patient_id, r.landmark_id, r.deformation_index) for r in manifest.records]
        assert keys == sorted(keys)

    def test_records_stay_within_deformation_count(self, small_dataset):
        manifest = load_manifest(small_dataset)
        assert {r.deformation_index for r in manifest.records} == {0, 1}
        record = load_entry_record(small_dataset, manifest.records[-1])
        assert record.deformation_index < manifest.n_deformations

    def test_rebuild_is_byte_identical(self, synthetic_cohort, small_dataset, tmp_path):
        build_dataset(
            [load_case_descriptor(p) for p in synthetic_cohort],
            DeformationSpec(seed=5, max_points_per_axis=6, max_displacement_mm=4.0),
            patch_size=32,
            out_dir=tmp_path,
            n_deformations=2,
            target_spacing_mm=None,
        )
        assert manifest_hash(tmp_path) == manifest_hash(small_dataset)

    def test_duplicate_patient_ids(self, synthetic_cohort, tmp_path):
        case = load_case_descriptor(synthetic_cohort[0])
        with pytest.raises(DuplicateIdError):
            build_dataset([case, case], DeformationSpec(), patch_size=32, out_dir=tmp_path)

    def test_with_split_requires_every_patient(self, small_dataset):
        manifest = load_manifest(small_dataset)
        with pytest.raises(DataError):
            with_split(manifest, make_split(["S01", "S02", "X"]))
