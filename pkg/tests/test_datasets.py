import gzip

import numpy as np
import pytest

from tools.zsecc import datasets
from tools.zsecc.datasets import Dataset
from tools.zsecc.errors import ArgumentError, IdxFormatError, OutputError


@pytest.fixture
def mnist_dir(tmp_path, rng):
    images = rng.integers(0, 256, size=(12, 6, 6)).astype(np.uint8)
    labels = rng.integers(0, 10, size=12).astype(np.uint8)
    datasets.write_idx(tmp_path / "train-images-idx3-ubyte", images)
    datasets.write_idx(tmp_path / "train-labels-idx1-ubyte", labels)
    for name, arr in (("t10k-images-idx3-ubyte", images[:4]), ("t10k-labels-idx1-ubyte", labels[:4])):
        datasets.write_idx(tmp_path / name, arr)
        raw = (tmp_path / name).read_bytes()
        (tmp_path / name).unlink()
        (tmp_path / f"{name}.gz").write_bytes(gzip.compress(raw))
    return tmp_path, images, labels


class TestIdx:
    def test_header_layout(self, tmp_path):
        path = tmp_path / "x-images-idx3-ubyte"
        datasets.write_idx(path, np.zeros((2, 3, 4), dtype=np.uint8))
        raw = path.read_bytes()
        assert raw[:4] == bytes([0, 0, 0x08, 3])
        assert raw[4:16] == bytes([0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0, 4])
        assert len(raw) == 16 + 24

    def test_int32_round_trip(self, tmp_path):
        arr = np.array([1, -2, 70000], dtype=np.int32)
        datasets.write_idx(tmp_path / "a", arr)
        out = datasets.read_idx(tmp_path / "a")
        assert out.dtype == np.int32
        assert out.tolist() == [1, -2, 70000]

    def test_gzip(self, mnist_dir):
        root, images, _ = mnist_dir
        out = datasets.read_idx(root / "t10k-images-idx3-ubyte.gz")
        assert np.array_equal(out, images[:4])

    def test_truncated(self, tmp_path):
        path = tmp_path / "t"
        datasets.write_idx(path, np.zeros((2, 3, 4), dtype=np.uint8))
        path.write_bytes(path.read_bytes()[:-1])
        with pytest.raises(IdxFormatError, match="payload"):
            datasets.read_idx(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m"
        path.write_bytes(bytes([1, 0, 8, 1, 0, 0, 0, 0]))
        with pytest.raises(IdxFormatError, match="magic"):
            datasets.read_idx(path)

    def test_unknown_type(self, tmp_path):
        path = tmp_path / "u"
        path.write_bytes(bytes([0, 0, 0x0A, 1, 0, 0, 0, 0]))
        with pytest.raises(IdxFormatError):
            datasets.read_idx(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(IdxFormatError):
            datasets.read_idx(tmp_path / "absent")

    def test_unsupported_write(self, tmp_path):
        with pytest.raises(ArgumentError):
            datasets.write_idx(tmp_path / "f", np.zeros(3, dtype=np.float32))

    def test_unwritable_target(self, tmp_path):
        (tmp_path / "blocker").write_text("")
        with pytest.raises(OutputError):
            datasets.write_idx(tmp_path / "blocker" / "x", np.zeros(3, dtype=np.uint8))


class TestLoad:
    def test_label_file_inferred(self, mnist_dir):
        root, images, labels = mnist_dir
        ds = datasets.load_idx(root / "train-images-idx3-ubyte")
        assert np.array_equal(ds.images, images)
        assert ds.labels.dtype == np.int64
        assert np.array_equal(ds.labels, labels)

    def test_label_file_not_inferable(self, tmp_path):
        with pytest.raises(ArgumentError):
            datasets.load_idx(tmp_path / "pictures.bin")

    def test_load_dir_both_splits(self, mnist_dir):
        root, images, _ = mnist_dir
        train, test = datasets.load_datasets(root, seed=0)
        assert (len(train), len(test)) == (12, 4)
        assert test.split == "test"
        assert np.array_equal(test.images, images[:4])

    def test_load_dir_missing(self, tmp_path):
        with pytest.raises(IdxFormatError):
            datasets.load_idx_dir(tmp_path, "train")

    def test_label_range_checked(self):
        with pytest.raises(ArgumentError):
            Dataset(np.zeros((2, 4, 4), dtype=np.uint8), np.array([0, 10]), classes=10)


class TestSynthetic:
    def test_deterministic(self):
        a = datasets.generate_synthetic(11, count=50)
        b = datasets.generate_synthetic(11, count=50)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_splits_differ(self):
        a = datasets.generate_synthetic(11, count=50, split="train")
        b = datasets.generate_synthetic(11, count=50, split="test")
        assert not np.array_equal(a.images, b.images)

    def test_shape_and_range(self):
        ds = datasets.generate_synthetic(3, classes=4, count=40, size=12)
        assert ds.images.shape == (40, 12, 12)
        assert ds.images.dtype == np.uint8
        assert set(ds.labels.tolist()) <= set(range(4))

    def test_fallback_without_dir(self):
        train, test = datasets.load_datasets(None, seed=5, train_count=30, test_count=10)
        assert (len(train), len(test)) == (30, 10)

    def test_head(self):
        ds = datasets.generate_synthetic(3, count=20)
        assert len(ds.head(5)) == 5


class TestExport:
    def test_save_dir_reads_back(self, tmp_path):
        train, test = datasets.load_datasets(None, seed=5, train_count=30, test_count=10)
        for ds in (train, test.head(4)):
            datasets.save_idx_dir(ds, tmp_path / "mnist")
        loaded_train, loaded_test = datasets.load_datasets(tmp_path / "mnist", seed=0)
        assert np.array_equal(loaded_train.images, train.images)
        assert np.array_equal(loaded_train.labels, train.labels)
        assert loaded_test.split == "test"
        assert np.array_equal(loaded_test.labels, test.labels[:4])

    def test_save_dir_under_file(self, tmp_path):
        (tmp_path / "blocker").write_text("")
        ds = datasets.generate_synthetic(3, count=5)
        with pytest.raises(OutputError):
            datasets.save_idx_dir(ds, tmp_path / "blocker" / "mnist")
