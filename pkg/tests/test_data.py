import numpy as np
import pytest

from mimkit.data import (
    DatasetSpec,
    crop_jitter,
    load_image_folder,
    read_ppm,
    synthetic_dataset,
    write_ppm,
)
from mimkit.errors import CorruptHeader, UnsupportedFormat
from mimkit.evaluate import linear_probe


class TestSyntheticDataset:
    def test_same_seed_same_digest(self):
        spec = DatasetSpec(num_classes=3, images_per_class=5, image_size=32, seed=9)
        assert synthetic_dataset(spec).digest() == synthetic_dataset(spec).digest()

    def test_different_seed_different_digest(self):
        a = synthetic_dataset(DatasetSpec(seed=0))
        b = synthetic_dataset(DatasetSpec(seed=1))
        assert a.digest() != b.digest()

    def test_counts_balanced(self):
        data = synthetic_dataset(DatasetSpec(num_classes=2, images_per_class=16))
        assert len(data) == 32
        assert np.bincount(data.labels).tolist() == [16, 16]

    def test_value_range(self):
        data = synthetic_dataset(DatasetSpec(num_classes=2, images_per_class=2))
        assert data.images.dtype == np.float32
        assert data.images.min() >= 0.0 and data.images.max() <= 1.0

    def test_raw_pixels_probe_above_chance(self):
        data = synthetic_dataset(DatasetSpec(num_classes=4, images_per_class=12,
                                             image_size=16, seed=5))
        feats = data.images.reshape(len(data), -1)
        out = linear_probe(feats, data.labels)
        assert out.accuracy > 0.25 + 0.2


class TestPpm:
    def test_round_trip_within_quantization(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.random((12, 10, 3)).astype(np.float32)
        path = str(tmp_path / "x.ppm")
        write_ppm(path, img)
        back = read_ppm(path)
        assert back.shape == img.shape
        assert np.max(np.abs(back - img)) <= 0.5 / 255.0 + 1e-7

    def test_all_255_reads_as_ones(self, tmp_path):
        path = str(tmp_path / "white.ppm")
        with open(path, "wb") as fh:
            fh.write(b"P6\n4 4\n255\n" + b"\xff" * (4 * 4 * 3))
        np.testing.assert_array_equal(read_ppm(path), np.ones((4, 4, 3), np.float32))

    def test_ascii_ppm_rejected(self, tmp_path):
        path = str(tmp_path / "ascii.ppm")
        with open(path, "wb") as fh:
            fh.write(b"P3\n1 1\n255\n255 255 255\n")
        with pytest.raises(UnsupportedFormat):
            read_ppm(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = str(tmp_path / "short.ppm")
        with open(path, "wb") as fh:
            fh.write(b"P6\n4 4\n255\n" + b"\x00" * 5)
        with pytest.raises(CorruptHeader):
            read_ppm(path)

    def test_comment_in_header(self, tmp_path):
        path = str(tmp_path / "c.ppm")
        with open(path, "wb") as fh:
            fh.write(b"P6\n# a comment\n2 2\n255\n" + b"\x80" * 12)
        img = read_ppm(path)
        assert img.shape == (2, 2, 3)


class TestImageFolder:
    def test_labels_follow_sorted_subdirs(self, tmp_path):
        rng = np.random.default_rng(1)
        for cls in ("b_class", "a_class"):
            d = tmp_path / cls
            d.mkdir()
            for k in range(2):
                write_ppm(str(d / f"img{k}.ppm"), rng.random((8, 8, 3)))
        data = load_image_folder(str(tmp_path))
        assert len(data) == 4
        # a_class sorts first -> label 0
        np.testing.assert_array_equal(data.labels, [0, 0, 1, 1])

    def test_empty_folder_rejected(self, tmp_path):
        with pytest.raises(CorruptHeader):
            load_image_folder(str(tmp_path))


class TestAugmentation:
    def test_shapes_preserved(self):
        rng = np.random.default_rng(2)
        images = rng.random((3, 16, 16, 3)).astype(np.float32)
        out = crop_jitter(images, np.random.default_rng(3))
        assert out.shape == images.shape
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_deterministic_given_rng(self):
        rng = np.random.default_rng(4)
        images = rng.random((2, 16, 16, 3)).astype(np.float32)
        a = crop_jitter(images, np.random.default_rng(5))
        b = crop_jitter(images, np.random.default_rng(5))
        assert a.tobytes() == b.tobytes()
