import json

import numpy as np
import pytest

from hetmt.config import OrganPrior, PhantomSpec
from hetmt.errors import PhantomGenerationError, VolumeFormatError
from hetmt.synthdata import (
    Volume,
    boundary_distance,
    gen_dataset,
    gen_phantom_case,
    load_case,
    load_manifest,
    noise_field,
    read_volume,
    select_cases,
    write_volume,
)


class TestVolumeFiles:
    def test_zeros_written_and_read_back_identical(self, tmp_path):
        vol = Volume(np.zeros((4, 4)), (1.0, 1.0), "intensity")
        write_volume(vol, tmp_path / "zeros")
        assert read_volume(tmp_path / "zeros.json") == vol

    def test_sidecar_layout(self, tmp_path):
        vol = Volume(np.arange(6).reshape(2, 3), (2.0, 0.5), "label")
        write_volume(vol, tmp_path / "lab")
        with open(tmp_path / "lab.json", encoding="utf-8") as f:
            header = json.load(f)
        assert header == {"shape": [2, 3], "dtype": "u8", "spacing": [2.0, 0.5], "order": "row-major", "kind": "label"}
        assert (tmp_path / "lab.bin").stat().st_size == 6

    def test_float_payload_is_little_endian(self, tmp_path):
        vol = Volume(np.array([[1.5, -2.0]]), (1.0, 1.0))
        write_volume(vol, tmp_path / "v")
        raw = (tmp_path / "v.bin").read_bytes()
        np.testing.assert_array_equal(np.frombuffer(raw, dtype="<f4"), [1.5, -2.0])

    def test_short_payload_is_rejected(self, tmp_path):
        write_volume(Volume(np.ones((4, 4)), (1.0, 1.0)), tmp_path / "v")
        raw = (tmp_path / "v.bin").read_bytes()
        (tmp_path / "v.bin").write_bytes(raw[:-4])
        with pytest.raises(VolumeFormatError, match="15 voxels"):
            read_volume(tmp_path / "v")

    def test_unknown_dtype_is_rejected(self, tmp_path):
        write_volume(Volume(np.ones((2, 2)), (1.0, 1.0)), tmp_path / "v")
        header = json.loads((tmp_path / "v.json").read_text())
        header["dtype"] = "f64"
        (tmp_path / "v.json").write_text(json.dumps(header))
        with pytest.raises(VolumeFormatError):
            read_volume(tmp_path / "v")

    def test_label_out_of_range_when_classes_given(self, tmp_path):
        write_volume(Volume(np.full((2, 2), 7), (1.0, 1.0), "label"), tmp_path / "lab")
        assert read_volume(tmp_path / "lab").data.max() == 7
        with pytest.raises(VolumeFormatError):
            read_volume(tmp_path / "lab", num_classes=6)

    def test_negative_variance_is_invalid(self):
        with pytest.raises(VolumeFormatError):
            Volume(np.array([[0.0, -1.0]]), (1.0, 1.0), "variance")

    def test_spacing_must_be_positive(self):
        with pytest.raises(VolumeFormatError):
            Volume(np.zeros((2, 2)), (1.0, 0.0))


class TestBoundaryDistance:
    def test_matches_brute_force(self):
        labels = np.zeros((12, 14), dtype=np.uint8)
        labels[3:7, 4:10] = 2
        labels[8:11, 1:4] = 1
        d = boundary_distance(labels)

        boundary = []
        for r in range(12):
            for c in range(14):
                neigh = [(r + dr, c + dc) for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1))]
                if any(0 <= a < 12 and 0 <= b < 14 and labels[a, b] != labels[r, c] for a, b in neigh):
                    boundary.append((r, c))
        boundary = np.array(boundary, dtype=np.float64)
        for r in range(12):
            for c in range(14):
                expected = np.sqrt(((boundary - [r, c]) ** 2).sum(axis=1)).min()
                assert d[r, c] == pytest.approx(expected, abs=1e-12)

    def test_uniform_labels_have_no_boundary(self):
        assert np.all(np.isinf(boundary_distance(np.zeros((5, 5), dtype=np.uint8))))


class TestPhantom:
    def test_same_seed_is_bit_identical(self, small_spec):
        a = gen_phantom_case(small_spec, 7)
        b = gen_phantom_case(small_spec, 7)
        for name, vol in a.volumes().items():
            assert vol.data.tobytes() == b.volumes()[name].data.tobytes(), name

    def test_different_seeds_differ(self, small_spec):
        a = gen_phantom_case(small_spec, 1)
        b = gen_phantom_case(small_spec, 2)
        assert not np.array_equal(a.ct.data, b.ct.data)

    def test_volumes_share_shape_and_spacing(self, small_spec):
        case = gen_phantom_case(small_spec, 3)
        shapes = {v.shape for v in case.volumes().values()}
        spacings = {v.spacing for v in case.volumes().values()}
        assert shapes == {(32, 32)} and spacings == {(1.0, 1.0)}
        assert case.labels.data.dtype == np.uint8
        assert set(np.unique(case.labels.data)) == {0, 1, 2, 3, 4, 5}

    def test_sigma_true_bounds_and_boundary_value(self, small_spec):
        case = gen_phantom_case(small_spec, 4)
        sigma = case.sigma_true.data
        assert sigma.min() >= np.float32(small_spec.sigma_lo)
        assert sigma.max() <= np.float32(small_spec.sigma_hi)
        d = boundary_distance(case.labels.data)
        np.testing.assert_array_equal(sigma[d == 0], np.float32(small_spec.sigma_hi))

    def test_sigma_true_is_monotone_in_distance(self, small_spec):
        case = gen_phantom_case(small_spec, 5)
        d = boundary_distance(case.labels.data).ravel()
        sigma = case.sigma_true.data.ravel()
        order = np.argsort(d, kind="stable")
        assert np.all(np.diff(sigma[order]) <= 0)

    def test_noise_field_decay(self, small_spec):
        far = noise_field(small_spec, np.array([1e3]))
        one_length = noise_field(small_spec, np.array([small_spec.decay_length]))
        assert far[0] == pytest.approx(small_spec.sigma_lo, abs=1e-3)
        expected = small_spec.sigma_lo + (small_spec.sigma_hi - small_spec.sigma_lo) / np.e
        assert one_length[0] == pytest.approx(expected)

    def test_mr_has_no_label_independent_noise(self, small_spec):
        case = gen_phantom_case(small_spec, 6)
        texture = (case.ct_clean.data - np.asarray(small_spec.ct_means)[case.labels.data]) / small_spec.texture_ct
        rims = case.ct_clean.data > 700
        mr_pred = np.asarray(small_spec.mr_means)[case.labels.data] + small_spec.texture_mr * texture
        np.testing.assert_allclose(case.mr.data[~rims], mr_pred[~rims], atol=1e-2)

    def test_cortical_rims_sit_inside_femurs(self, small_spec):
        case = gen_phantom_case(small_spec, 8)
        bright = case.ct_clean.data > 700
        assert bright.any()
        assert set(np.unique(case.labels.data[bright])) <= {1, 2}

    def test_placement_failure_names_the_organ(self):
        organs = [
            OrganPrior("a", 1, (0.5, 0.5), (0.5, 0.5), (0.2, 0.2), (0.2, 0.2)),
            OrganPrior("b", 2, (0.5, 0.5), (0.5, 0.5), (0.2, 0.2), (0.2, 0.2)),
        ]
        spec = PhantomSpec(
            image_size=(32, 32),
            class_names=("bg", "a", "b"),
            ct_means=(0.0, 1.0, 2.0),
            mr_means=(0.0, 1.0, 2.0),
            organs=organs,
            max_retries=3,
        )
        with pytest.raises(PhantomGenerationError) as info:
            gen_phantom_case(spec, 0)
        assert info.value.organ == "b"
        assert info.value.attempts == 3

    def test_three_dimensional_case(self):
        spec = PhantomSpec(image_size=(4, 32, 32), spacing=(3.0, 1.0, 1.0))
        case = gen_phantom_case(spec, 0)
        assert case.mr.shape == (4, 32, 32)
        assert case.sigma_true.data.min() >= np.float32(spec.sigma_lo)


class TestDataset:
    def test_manifest_lists_cases_with_four_volumes(self, small_spec, tmp_path):
        manifest = gen_dataset(small_spec, 3, tmp_path)
        assert [e["id"] for e in manifest] == ["case_000", "case_001", "case_002"]
        for entry in manifest:
            for name in ("mr", "ct", "labels", "sigma_true"):
                assert (tmp_path / entry[name]).exists()
                assert (tmp_path / entry[name]).with_suffix(".bin").exists()
        assert [e["split"] for e in manifest] == ["train", "train", "test"]
        assert [e["fold"] for e in manifest] == [0, 1, 2]
        assert load_manifest(tmp_path / "manifest.json") == manifest

    def test_rerun_is_identical(self, small_spec, tmp_path):
        gen_dataset(small_spec, 2, tmp_path / "a")
        gen_dataset(small_spec, 2, tmp_path / "b")
        for path in sorted((tmp_path / "a").iterdir()):
            assert path.read_bytes() == (tmp_path / "b" / path.name).read_bytes(), path.name

    def test_case_seeds_follow_spec_seed(self, small_spec, tmp_path):
        gen_dataset(small_spec, 2, tmp_path)
        entry = load_manifest(tmp_path / "manifest.json")[1]
        loaded = load_case(entry, tmp_path, num_classes=6)
        expected = gen_phantom_case(small_spec, small_spec.seed + 1)
        assert loaded.ct == expected.ct
        assert loaded.labels == expected.labels

    def test_zero_cases_is_an_error(self, small_spec, tmp_path):
        with pytest.raises(ValueError):
            gen_dataset(small_spec, 0, tmp_path)

    def test_holdout_fold_selection(self):
        entries = [{"id": str(i), "split": "train", "fold": i % 3} for i in range(6)]
        assert [e["id"] for e in select_cases(entries, "test", holdout_fold=1)] == ["1", "4"]
        assert [e["id"] for e in select_cases(entries, "train", holdout_fold=1)] == ["0", "2", "3", "5"]
        assert select_cases(entries, "test") == []
