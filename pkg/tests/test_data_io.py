import numpy as np
import pytest

from branchtune import data as D


class TestDataset:
    def test_len_and_classes(self):
        ds = D.Dataset(np.zeros((6, 3, 16, 16), dtype=np.float32),
                       np.array([0, 0, 1, 1, 2, 2]))
        assert len(ds) == 6
        assert ds.classes.tolist() == [0, 1, 2]

    def test_label_count_mismatch_rejected(self):
        with pytest.raises(ValueError):
            D.Dataset(np.zeros((4, 3, 16, 16), dtype=np.float32),
                      np.array([0, 1]))

    def test_non_nchw_rejected(self):
        with pytest.raises(ValueError):
            D.Dataset(np.zeros((4, 16, 16), dtype=np.float32),
                      np.zeros(4, dtype=np.int64))

    def test_subset_picks_rows(self):
        ds = D.gen_synthetic(classes=2, per_class=3, size=16, seed=0)
        sub = ds.subset([1, 4])
        assert np.array_equal(sub.images[0], ds.images[1])
        assert np.array_equal(sub.images[1], ds.images[4])
        assert sub.labels.tolist() == [ds.labels[1], ds.labels[4]]

    def test_concat_keeps_order(self):
        a = D.gen_synthetic(classes=2, per_class=2, size=16, seed=0)
        b = D.gen_synthetic(classes=2, per_class=2, size=16, seed=1)
        both = D.concat_datasets([a, b])
        assert len(both) == 8
        assert np.array_equal(both.images[:4], a.images)
        assert np.array_equal(both.images[4:], b.images)


class TestGenSynthetic:
    def test_shape_dtype_and_labels(self):
        ds = D.gen_synthetic(classes=4, per_class=5, size=16, seed=3)
        assert ds.images.shape == (20, 3, 16, 16)
        assert ds.images.dtype == np.float32
        assert ds.labels.tolist() == sorted([c for c in range(4)] * 5)

    def test_pixel_range(self):
        ds = D.gen_synthetic(classes=3, per_class=4, size=16, seed=0)
        assert ds.images.min() >= 0.0
        assert ds.images.max() <= 1.0

    def test_deterministic(self):
        a = D.gen_synthetic(classes=3, per_class=2, size=16, seed=7)
        b = D.gen_synthetic(classes=3, per_class=2, size=16, seed=7)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_seed_changes_images(self):
        a = D.gen_synthetic(classes=3, per_class=2, size=16, seed=0)
        b = D.gen_synthetic(classes=3, per_class=2, size=16, seed=1)
        assert not np.array_equal(a.images, b.images)

    def test_classes_look_different(self):
        # noiseless class means differ because orientation/frequency differ
        ds = D.gen_synthetic(classes=4, per_class=8, size=32, seed=0,
                             noise=0.0)
        means = [ds.images[ds.labels == c].mean(axis=0) for c in range(4)]
        for i in range(4):
            for j in range(i + 1, 4):
                assert np.abs(means[i] - means[j]).max() > 0.05

    def test_channels_differ(self):
        ds = D.gen_synthetic(classes=2, per_class=1, size=16, seed=0,
                             noise=0.0)
        img = ds.images[0]
        assert not np.array_equal(img[0], img[1])
        assert not np.array_equal(img[1], img[2])

    def test_phase_varies_within_class(self):
        ds = D.gen_synthetic(classes=2, per_class=3, size=16, seed=0,
                             noise=0.0)
        assert not np.array_equal(ds.images[0], ds.images[1])

    @pytest.mark.parametrize("kwargs", [
        dict(classes=1, per_class=2),
        dict(classes=2, per_class=0),
        dict(classes=2, per_class=2, size=8),
    ])
    def test_bad_arguments_rejected(self, kwargs):
        with pytest.raises(ValueError):
            D.gen_synthetic(**kwargs)


class TestCifarLoader:
    def _write_records(self, path, n, seed=0):
        rng = np.random.Generator(np.random.PCG64(seed))
        records = rng.integers(0, 256, size=(n, 3074), dtype=np.uint8)
        records[:, 0] = rng.integers(0, 20, size=n)   # coarse labels
        records[:, 1] = rng.integers(0, 100, size=n)  # fine labels
        path.write_bytes(records.tobytes())
        return records

    def test_shapes_and_scaling(self, tmp_path):
        path = tmp_path / "train.bin"
        records = self._write_records(path, 5)
        ds = D.load_cifar100_binary(path)
        assert ds.images.shape == (5, 3, 32, 32)
        assert ds.images.dtype == np.float32
        expected = records[:, 2:].reshape(5, 3, 32, 32) / 255.0
        assert np.allclose(ds.images, expected)

    def test_fine_labels_used(self, tmp_path):
        path = tmp_path / "train.bin"
        records = self._write_records(path, 4, seed=1)
        ds = D.load_cifar100_binary(path)
        assert ds.labels.tolist() == records[:, 1].tolist()

    def test_truncated_file_rejected(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"\x00" * (3074 * 2 + 17))
        with pytest.raises(D.FormatError, match=str(3074 * 2 + 17)):
            D.load_cifar100_binary(path)

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.bin"
        path.write_bytes(b"")
        with pytest.raises(D.FormatError):
            D.load_cifar100_binary(path)

    def test_pixel_layout_row_major_per_channel(self, tmp_path):
        # first pixel byte of a record is channel 0, row 0, column 0
        path = tmp_path / "one.bin"
        record = np.zeros(3074, dtype=np.uint8)
        record[2] = 255            # R plane, top-left
        record[2 + 1024] = 51      # G plane, top-left
        path.write_bytes(record.tobytes())
        ds = D.load_cifar100_binary(path)
        assert ds.images[0, 0, 0, 0] == 1.0
        assert np.isclose(ds.images[0, 1, 0, 0], 51 / 255.0)
        assert ds.images[0, 2, 0, 0] == 0.0


class TestNpzRoundTrip:
    def test_round_trip_bitwise(self, tmp_path):
        ds = D.gen_synthetic(classes=3, per_class=2, size=16, seed=5)
        path = tmp_path / "ds.npz"
        D.save_npz(ds, path)
        back = D.load_npz(path)
        assert np.array_equal(back.images, ds.images)
        assert np.array_equal(back.labels, ds.labels)
        assert back.images.dtype == ds.images.dtype

    def test_missing_arrays_rejected(self, tmp_path):
        path = tmp_path / "bad.npz"
        np.savez(path, images=np.zeros((2, 3, 16, 16), dtype=np.float32))
        with pytest.raises(D.FormatError):
            D.load_npz(path)
