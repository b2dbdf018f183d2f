import itertools

import numpy as np
import pytest

from triseg import nifti
from triseg.data import (
    CaseBundle,
    LabelVolume,
    ModalityVolume,
    RAW_LABELS,
    derive_region_masks,
    list_cases,
    load_case,
    read_clinical_csv,
    remap_labels,
    save_segmentation,
)
from triseg.errors import (
    CorruptVolume,
    GeometryMismatch,
    InvalidLabel,
    IoError,
    MissingModality,
)


def _write_case(root, case_id, shape=(12, 10, 14), seg=True, skip=(),
                labels=None, rng=None):
    rng = rng or np.random.default_rng(0)
    case_dir = root / case_id
    for suffix in ("t1", "t1ce", "t2", "flair"):
        if suffix in skip:
            continue
        vol = rng.uniform(10, 500, size=shape).astype(np.float32)
        nifti.write(case_dir / f"{case_id}_{suffix}.nii.gz", vol)
    if seg:
        if labels is None:
            labels = rng.choice([0, 0, 0, 1, 2, 4], size=shape).astype(np.int16)
        nifti.write(case_dir / f"{case_id}_seg.nii.gz", labels.astype(np.uint8))
    return case_dir


class TestNiftiRoundTrip:
    def test_float_volume(self, tmp_path, rng):
        vol = rng.normal(size=(7, 9, 5)).astype(np.float32)
        path = nifti.write(tmp_path / "v.nii.gz", vol)
        back, header = nifti.read(path)
        assert back.shape == vol.shape
        np.testing.assert_array_equal(back, vol)
        assert len(header) == nifti.HEADER_SIZE

    def test_uint8_volume(self, tmp_path):
        vol = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
        back, _ = nifti.read(nifti.write(tmp_path / "v.nii.gz", vol))
        np.testing.assert_array_equal(back, vol)

    def test_header_reuse_preserves_pixdim(self, tmp_path):
        vol = np.zeros((4, 4, 4), dtype=np.float32)
        p1 = nifti.write(tmp_path / "a.nii.gz", vol)
        _, header = nifti.read(p1)
        p2 = nifti.write(tmp_path / "b.nii.gz", vol, header=header)
        _, header2 = nifti.read(p2)
        assert header2[76:108] == header[76:108]   # pixdim block

    def test_uncompressed(self, tmp_path):
        vol = np.ones((3, 3, 3), dtype=np.float32)
        back, _ = nifti.read(nifti.write(tmp_path / "v.nii", vol))
        np.testing.assert_array_equal(back, vol)

    def test_garbage_rejected(self, tmp_path):
        p = tmp_path / "bad.nii"
        p.write_bytes(b"\x00" * 500)
        with pytest.raises(IoError):
            nifti.read(p)


class TestLoadCase:
    def test_full_case(self, tmp_path, rng):
        _write_case(tmp_path, "C1", shape=(12, 10, 14), rng=rng)
        bundle = load_case(tmp_path, "C1")
        assert set(bundle.volumes) == {"T1", "T1ce", "T2", "FLAIR"}
        assert bundle.shape == (12, 10, 14)
        assert bundle.labels is not None
        assert set(np.unique(bundle.labels.voxels)) <= {0, 1, 2, 3}

    def test_missing_required_modality(self, tmp_path, rng):
        _write_case(tmp_path, "C2", skip=("flair",), rng=rng)
        with pytest.raises(MissingModality):
            load_case(tmp_path, "C2")

    def test_missing_optional_t1_ok(self, tmp_path, rng):
        _write_case(tmp_path, "C3", skip=("t1",), rng=rng)
        bundle = load_case(tmp_path, "C3")
        assert "T1" not in bundle.volumes

    def test_case_absent_from_csv(self, tmp_path, rng):
        _write_case(tmp_path, "C4", rng=rng)
        (tmp_path / "survival_info.csv").write_text(
            "case_id,age,survival_days,resection_status\nOTHER,60,300,GTR\n")
        bundle = load_case(tmp_path, "C4")
        assert bundle.age is None and bundle.survival_days is None

    def test_clinical_fields_populated(self, tmp_path, rng):
        _write_case(tmp_path, "C5", rng=rng)
        (tmp_path / "survival_info.csv").write_text(
            "case_id,age,survival_days,resection_status\nC5,61.3,123,GTR\n")
        bundle = load_case(tmp_path, "C5")
        assert bundle.age == 61.3
        assert bundle.survival_days == 123
        assert bundle.resection_status == "GTR"

    def test_alive_survival_kept_for_segmentation(self, tmp_path, rng):
        _write_case(tmp_path, "C6", rng=rng)
        (tmp_path / "survival_info.csv").write_text(
            "case_id,age,survival_days,resection_status\nC6,55,ALIVE,GTR\n")
        bundle = load_case(tmp_path, "C6")
        assert bundle.age == 55
        assert bundle.survival_days is None

    def test_nonfinite_voxels_rejected(self, tmp_path, rng):
        case_dir = _write_case(tmp_path, "C7", rng=rng)
        bad = np.full((12, 10, 14), np.nan, dtype=np.float32)
        nifti.write(case_dir / "C7_t2.nii.gz", bad)
        with pytest.raises(CorruptVolume):
            load_case(tmp_path, "C7")

    def test_shape_mismatch_rejected(self, tmp_path, rng):
        case_dir = _write_case(tmp_path, "C8", rng=rng)
        nifti.write(case_dir / "C8_t2.nii.gz",
                    rng.uniform(size=(6, 6, 6)).astype(np.float32))
        with pytest.raises(GeometryMismatch):
            load_case(tmp_path, "C8")

    def test_list_cases(self, tmp_path, rng):
        for cid in ("B2", "A1"):
            _write_case(tmp_path, cid, rng=rng)
        assert list_cases(tmp_path) == ["A1", "B2"]


class TestRemapLabels:
    def test_remap_4_to_3_preserves_counts(self, rng):
        raw_ids = rng.choice([0, 1, 2, 4], size=(9, 9, 9))
        raw = LabelVolume(raw_ids.astype(np.int16), allowed=RAW_LABELS)
        out = remap_labels(raw)
        assert set(np.unique(out.voxels)) <= {0, 1, 2, 3}
        for raw_id, canon_id in ((0, 0), (1, 1), (2, 2), (4, 3)):
            assert (out.voxels == canon_id).sum() == (raw_ids == raw_id).sum()

    def test_all_zero_identity(self):
        raw = LabelVolume(np.zeros((4, 4, 4), np.int16), allowed=RAW_LABELS)
        assert (remap_labels(raw).voxels == 0).all()

    def test_unexpected_id_rejected(self):
        with pytest.raises(InvalidLabel):
            LabelVolume(np.full((2, 2, 2), 5, np.int16), allowed=RAW_LABELS)
        # constructed with a laxer allowed set, remap still refuses id 3
        lax = LabelVolume(np.full((2, 2, 2), 3, np.int16))
        with pytest.raises(InvalidLabel):
            remap_labels(lax)

    def test_idempotent_on_canonical_without_4(self, rng):
        ids = rng.choice([0, 1, 2], size=(5, 5, 5)).astype(np.int16)
        raw = LabelVolume(ids, allowed=RAW_LABELS)
        once = remap_labels(raw)
        twice = remap_labels(LabelVolume(once.voxels, allowed=RAW_LABELS))
        np.testing.assert_array_equal(once.voxels, twice.voxels)

    def test_bijection_on_nonzero_ids(self):
        ids = np.array([[[1, 2], [4, 0]], [[4, 1], [2, 2]]], np.int16)
        out = remap_labels(LabelVolume(ids, allowed=RAW_LABELS)).voxels
        inverse = out.copy()
        inverse[inverse == 3] = 4
        np.testing.assert_array_equal(inverse, ids)


class TestRegionMasks:
    def test_one_voxel_each(self):
        v = np.zeros((3, 3, 3), np.int16)
        v[0, 0, 0] = 1
        v[1, 1, 1] = 2
        v[2, 2, 2] = 3
        masks = derive_region_masks(LabelVolume(v))
        assert masks.wt.sum() == 3
        assert masks.tc.sum() == 2
        assert masks.et.sum() == 1

    def test_all_background(self):
        masks = derive_region_masks(LabelVolume(np.zeros((4, 4, 4), np.int16)))
        assert not masks.wt.any() and not masks.tc.any() and not masks.et.any()

    def test_edema_only(self):
        v = np.full((4, 4, 4), 2, np.int16)
        masks = derive_region_masks(LabelVolume(v))
        assert masks.wt.sum() == 64 and masks.tc.sum() == 0 and masks.et.sum() == 0

    def test_inclusion_on_random_volumes(self, rng):
        for _ in range(25):
            v = rng.integers(0, 4, size=(6, 7, 5)).astype(np.int16)
            masks = derive_region_masks(LabelVolume(v))
            assert (masks.et <= masks.tc).all()
            assert (masks.tc <= masks.wt).all()

    def test_exhaustive_2x2x2_against_set_algebra(self):
        """Every raw labeling of a 2x2x2 volume matches a set-algebra oracle."""
        coords = list(np.ndindex(2, 2, 2))
        count = 0
        for assignment in itertools.product((0, 1, 2, 4), repeat=8):
            raw = np.array(assignment, np.int16).reshape(2, 2, 2)
            canonical = remap_labels(LabelVolume(raw, allowed=RAW_LABELS))
            masks = derive_region_masks(canonical)
            wt_set = {c for c in coords if raw[c] in (1, 2, 4)}
            tc_set = {c for c in coords if raw[c] in (1, 4)}
            et_set = {c for c in coords if raw[c] == 4}
            assert {tuple(i) for i in np.argwhere(masks.wt)} == wt_set
            assert {tuple(i) for i in np.argwhere(masks.tc)} == tc_set
            assert {tuple(i) for i in np.argwhere(masks.et)} == et_set
            count += 1
        assert count == 4 ** 8


class TestSaveSegmentation:
    def test_writes_brats_convention(self, tmp_path):
        v = np.zeros((5, 5, 5), np.int16)
        v[2, 2, 2] = 3
        v[1, 1, 1] = 1
        path = save_segmentation("CASE", LabelVolume(v), tmp_path)
        stored, _ = nifti.read(path)
        assert stored[2, 2, 2] == 4
        assert stored[1, 1, 1] == 1
        assert set(np.unique(stored)) <= {0, 1, 2, 4}

    def test_round_trip_identity(self, tmp_path, rng):
        v = rng.integers(0, 4, size=(6, 6, 6)).astype(np.int16)
        path = save_segmentation("CASE", LabelVolume(v), tmp_path)
        stored, _ = nifti.read(path)
        back = remap_labels(LabelVolume(stored.astype(np.int16),
                                        allowed=RAW_LABELS))
        np.testing.assert_array_equal(back.voxels, v)

    def test_unwritable_dir(self, tmp_path):
        blocker = tmp_path / "blocker"
        blocker.write_text("not a directory")
        with pytest.raises(IoError):
            save_segmentation("CASE", LabelVolume(np.zeros((2, 2, 2),
                                                           np.int16)),
                              blocker / "sub")


class TestBundleInvariants:
    def test_requires_all_input_modalities(self, rng):
        vol = ModalityVolume(rng.uniform(size=(4, 4, 4)).astype(np.float32),
                             "T2")
        with pytest.raises(MissingModality):
            CaseBundle(case_id="X", volumes={"T2": vol})

    def test_label_shape_must_match(self, rng):
        volumes = {m: ModalityVolume(
            rng.uniform(size=(4, 4, 4)).astype(np.float32), m)
            for m in ("T1ce", "T2", "FLAIR")}
        with pytest.raises(GeometryMismatch):
            CaseBundle(case_id="X", volumes=volumes,
                       labels=LabelVolume(np.zeros((3, 3, 3), np.int16)))


def test_clinical_csv_parsing(tmp_path):
    p = tmp_path / "survival_info.csv"
    p.write_text(
        "case_id,age,survival_days,resection_status\n"
        "A,60.5,150,GTR\n"
        "B,47,ALIVE,STR\n"
        "C,58,,\n")
    rows = read_clinical_csv(p)
    assert rows["A"] == (60.5, 150.0, "GTR")
    assert rows["B"] == (47.0, None, "STR")
    assert rows["C"] == (58.0, None, None)
