import json

import numpy as np
import pytest

from data import (MODALITY_A, MODALITY_B, AugmentationConfig, DatasetManifest, LabelRangeError, ManifestError,
                  ManifestRecord, PgmFormatError, PgmMaxvalError, PgmTruncatedError, SynthConfig, augment,
                  generate_synthetic_benchmark, load_image, load_label, load_manifest, read_pgm, resize_image,
                  resize_label, sample_rng, save_image, save_label, save_manifest, synthetic_anatomy, write_pgm)
from edge import extract_edges


def tree_bytes(root):
    return {str(path.relative_to(root)): path.read_bytes() for path in sorted(root.rglob("*")) if path.is_file()}


class TestPgm:

    def test_all_zero(self, tmp_path):
        write_pgm(tmp_path / "z.pgm", np.zeros((3, 5), dtype=np.uint8), 255)
        image = load_image(tmp_path / "z.pgm")
        assert image.shape == (3, 5)
        assert image.dtype == np.float32
        assert not image.any()

    def test_sixteen_bit_full_scale(self, tmp_path):
        write_pgm(tmp_path / "w.pgm", np.full((2, 2), 65535), 65535)
        np.testing.assert_array_equal(load_image(tmp_path / "w.pgm"), 1.0)

    def test_sixteen_bit_is_big_endian(self, tmp_path):
        write_pgm(tmp_path / "be.pgm", np.array([[1, 256]]), 65535)
        body = (tmp_path / "be.pgm").read_bytes()[-4:]
        assert body == b"\x00\x01\x01\x00"

    def test_header_comments(self, tmp_path):
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
        samples, maxval = read_pgm(path)
        assert maxval == 255
        np.testing.assert_array_equal(samples, [[0, 255]])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "p2.pgm"
        path.write_bytes(b"P2\n1 1\n255\n0\n")
        with pytest.raises(PgmFormatError):
            read_pgm(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "t.pgm"
        path.write_bytes(b"P5\n4 4\n255\n" + bytes(10))
        with pytest.raises(PgmTruncatedError):
            read_pgm(path)

    def test_image_maxval_must_be_full_scale(self, tmp_path):
        write_pgm(tmp_path / "m.pgm", np.zeros((2, 2)), 100)
        with pytest.raises(PgmMaxvalError):
            load_image(tmp_path / "m.pgm")

    def test_image_round_trip_quantization(self, tmp_path, rng):
        image = rng.uniform(size=(6, 7)).astype(np.float32)
        save_image(tmp_path / "img.pgm", image)
        np.testing.assert_allclose(load_image(tmp_path / "img.pgm"), image, atol=1 / 65535)

    def test_label_round_trip(self, tmp_path):
        save_label(tmp_path / "l.pgm", np.array([[0, 1], [2, 3]]), 4)
        np.testing.assert_array_equal(load_label(tmp_path / "l.pgm", 4), [[0, 1], [2, 3]])

    def test_label_value_above_class_count(self, tmp_path):
        path = tmp_path / "l.pgm"
        path.write_bytes(b"P5\n2 1\n2\n\x01\x03")
        with pytest.raises(LabelRangeError):
            load_label(path, 3)

    @pytest.mark.parametrize("maxval", [255, 3])
    def test_label_maxval_must_match_class_count(self, tmp_path, maxval):
        write_pgm(tmp_path / "l.pgm", np.zeros((2, 2)), maxval)
        with pytest.raises(PgmMaxvalError):
            load_label(tmp_path / "l.pgm", 3)

    def test_two_class_label_maxval(self, tmp_path):
        save_label(tmp_path / "b.pgm", np.array([[0, 1]]), 2)
        assert read_pgm(tmp_path / "b.pgm")[1] == 1
        np.testing.assert_array_equal(load_label(tmp_path / "b.pgm", 2), [[0, 1]])

    def test_header_needs_separator(self, tmp_path):
        path = tmp_path / "run_on.pgm"
        path.write_bytes(b"P510 1\n255\n" + bytes(510))
        with pytest.raises(PgmFormatError):
            read_pgm(path)

    def test_label_must_be_eight_bit(self, tmp_path):
        write_pgm(tmp_path / "l16.pgm", np.zeros((2, 2)), 65535)
        with pytest.raises(PgmMaxvalError):
            load_label(tmp_path / "l16.pgm", 3)


class TestManifest:

    def test_round_trip(self, tmp_path):
        manifest = DatasetManifest([ManifestRecord("a/img.pgm", "a/label.pgm", (1.5, 1.5))], 3, "A", tmp_path)
        save_manifest(manifest, tmp_path / "m.json")
        loaded = load_manifest(tmp_path / "m.json")
        assert loaded.records == manifest.records
        assert loaded.num_classes == 3
        assert loaded.image_path(0) == tmp_path / "a/img.pgm"
        assert loaded.spacing(0) == (1.5, 1.5)

    def test_unlabelled(self, tmp_path):
        manifest = DatasetManifest([ManifestRecord("x.pgm")], 2, "B", tmp_path)
        assert not manifest.labelled
        assert manifest.label_path(0) is None
        with pytest.raises(ManifestError):
            manifest.load_label(0)

    def test_mixed_labels_rejected(self):
        with pytest.raises(ManifestError):
            DatasetManifest([ManifestRecord("a.pgm", "a_l.pgm"), ManifestRecord("b.pgm")], 2)

    def test_empty_rejected(self):
        with pytest.raises(ManifestError):
            DatasetManifest([], 2)

    def test_invalid_json(self, tmp_path):
        (tmp_path / "bad.json").write_text(json.dumps({"records": [{"label": "x"}]}))
        with pytest.raises(ManifestError):
            load_manifest(tmp_path / "bad.json")

    def test_subset_and_stem(self, tmp_path):
        records = [ManifestRecord(f"img_{i:04d}.pgm", f"label_{i:04d}.pgm") for i in range(4)]
        subset = DatasetManifest(records, 2, "A", tmp_path).subset([1, 3])
        assert [r.stem for r in subset.records] == ["img_0001", "img_0003"]


class TestAugment:

    def test_disabled_is_identity(self, rng):
        image = rng.uniform(size=(16, 16)).astype(np.float32)
        label = rng.integers(0, 3, size=(16, 16))
        out_image, out_label = augment(image, label, AugmentationConfig.disabled(), rng)
        np.testing.assert_array_equal(out_image, image)
        np.testing.assert_array_equal(out_label, label)

    def test_disabled_resizes(self, rng):
        image = rng.uniform(size=(16, 16)).astype(np.float32)
        label = rng.integers(0, 3, size=(16, 16))
        out_image, out_label = augment(image, label, AugmentationConfig.disabled(output_size=(8, 8)), rng)
        assert out_image.shape == out_label.shape == (8, 8)
        assert set(np.unique(out_label)) <= set(np.unique(label))

    def test_zero_rotation_full_crop_is_identity(self, rng):
        image = rng.uniform(size=(12, 12)).astype(np.float32)
        label = rng.integers(0, 3, size=(12, 12))
        cfg = AugmentationConfig(crop_scale=(1.0, 1.0), rotation_deg=0.0, color=False)
        out_image, out_label = augment(image, label, cfg, sample_rng(0, 1, 2))
        np.testing.assert_array_equal(out_image, image)
        np.testing.assert_array_equal(out_label, label)

    def test_seeded_determinism(self, rng):
        image = rng.uniform(size=(20, 20)).astype(np.float32)
        label = rng.integers(0, 3, size=(20, 20))
        cfg = AugmentationConfig(output_size=(16, 16))
        first = augment(image, label, cfg, sample_rng(7, 3, 11))
        second = augment(image, label, cfg, sample_rng(7, 3, 11))
        assert first[0].tobytes() == second[0].tobytes()
        assert first[1].tobytes() == second[1].tobytes()

    def test_geometry_shared_by_image_and_label(self):
        label = synthetic_anatomy(32, 2, np.random.default_rng(0))
        image = (label / 2.0).astype(np.float32)
        cfg = AugmentationConfig(color=False, output_size=(32, 32))
        out_image, out_label = augment(image, label, cfg, sample_rng(1, 0, 0))
        # away from class borders the bilinear image still encodes the nearest-resampled label
        agree = np.isclose(out_image, out_label / 2.0, atol=0.1)
        assert agree.mean() > 0.7

    def test_output_in_unit_range(self, rng):
        image = rng.uniform(size=(16, 16)).astype(np.float32)
        cfg = AugmentationConfig(contrast_gain=(1.5, 2.0))
        out_image, out_label = augment(image, None, cfg, rng)
        assert out_label is None
        assert out_image.min() >= 0.0 and out_image.max() <= 1.0

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            augment(np.zeros((4, 4)), np.zeros((4, 5), dtype=int), AugmentationConfig(), rng)

    def test_resize_label_keeps_classes(self):
        label = np.array([[0, 2], [1, 2]])
        resized = resize_label(label, (4, 4))
        np.testing.assert_array_equal(resized[:2, :2], 0)
        np.testing.assert_array_equal(resized[2:, 2:], 2)
        assert resize_image(np.ones((3, 3), dtype=np.float32), (6, 6)).shape == (6, 6)


class TestSyntheticBenchmark:

    def test_same_seed_byte_identical(self, tmp_path):
        cfg = SynthConfig(image_size=16, n_train=3, n_test=2, seed=9)
        generate_synthetic_benchmark(cfg, tmp_path / "one")
        generate_synthetic_benchmark(cfg, tmp_path / "two")
        assert tree_bytes(tmp_path / "one") == tree_bytes(tmp_path / "two")

    def test_layout_and_manifests(self, tiny_benchmark):
        root = tiny_benchmark["root"]
        for name in ("a_train", "a_test", "b_train", "b_test"):
            manifest = load_manifest(root / f"{name}.json")
            assert manifest.num_classes == 3
            assert manifest.labelled
        assert len(tiny_benchmark["a_train"]) == 6
        assert len(tiny_benchmark["b_test"]) == 3
        assert tiny_benchmark["a_train"].spacing(0) == MODALITY_A.spacing_mm
        assert tiny_benchmark["b_train"].spacing(0) == MODALITY_B.spacing_mm

    def test_modalities_share_anatomy(self, tiny_benchmark):
        a, b = tiny_benchmark["a_train"], tiny_benchmark["b_train"]
        for index in range(len(a)):
            np.testing.assert_array_equal(a.load_label(index), b.load_label(index))

    def test_modality_b_reverses_contrast(self, tiny_benchmark):
        a, b = tiny_benchmark["a_train"], tiny_benchmark["b_train"]
        label = a.load_label(0)
        image_a, image_b = a.load_image(0), b.load_image(0)
        background, inner = label == 0, label == 2
        assert image_a[inner].mean() > image_a[background].mean()
        assert image_b[inner].mean() < image_b[background].mean()

    def test_every_class_present(self, tiny_benchmark):
        label = tiny_benchmark["a_test"].load_label(0)
        assert set(np.unique(label)) == {0, 1, 2}

    def test_modality_gap_keeps_shared_edges(self, tmp_path):
        a, _, b, _ = generate_synthetic_benchmark(SynthConfig(image_size=64, n_train=50, n_test=1, seed=1), tmp_path)
        for index in range(len(a)):
            inside = a.load_label(index) > 0
            image_a, image_b = a.load_image(index), b.load_image(index)
            assert np.abs(image_a[inside] - image_b[inside]).mean() > 0.3
            edges_a = extract_edges(image_a).values > 0
            edges_b = extract_edges(image_b).values > 0
            assert (edges_a & edges_b).sum() / (edges_a | edges_b).sum() > 0.5

    def test_too_few_levels(self, tmp_path):
        with pytest.raises(ValueError):
            generate_synthetic_benchmark(SynthConfig(image_size=8, n_train=1, n_test=1, num_structures=3), tmp_path)
