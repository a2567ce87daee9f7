"""Image datasets: IDX files (MNIST layout) and a seeded synthetic stand-in."""
from __future__ import annotations

import gzip
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError, IdxFormatError, OutputError
from .rng import stream

logger = logging.getLogger(__name__)

# IDX type byte -> big-endian dtype
_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # uint8 (n, H, W)
    labels: np.ndarray  # int64 (n,)
    split: str = "train"
    classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ArgumentError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ArgumentError(f"labels must lie in [0, {self.classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def head(self, n: int) -> Dataset:
        return Dataset(self.images[:n], self.labels[:n], self.split, self.classes)


def _read_bytes(path: Path) -> bytes:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def read_idx(path: Path | str) -> np.ndarray:
    """Parse one IDX file (optionally gzip-compressed) into an array."""
    path = Path(path)
    try:
        raw = _read_bytes(path)
    except OSError as e:
        raise IdxFormatError(f"cannot read {path}: {e}") from e
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    if raw[0] != 0 or raw[1] != 0:
        raise IdxFormatError(f"{path}: bad magic {raw[:4].hex()}")
    dtype = _IDX_TYPES.get(raw[2])
    if dtype is None:
        raise IdxFormatError(f"{path}: unknown IDX element type 0x{raw[2]:02x}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if ndim == 0 or len(raw) < header:
        raise IdxFormatError(f"{path}: truncated dimension header")
    dims = tuple(int(d) for d in np.frombuffer(raw, dtype=">u4", count=ndim, offset=4))
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - header != expected:
        raise IdxFormatError(
            f"{path}: payload is {len(raw) - header} bytes, dims {dims} need {expected}"
        )
    data = np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims)
    return data.astype(dtype.newbyteorder("="))


def _labels_path_for(images_path: Path) -> Path:
    name = images_path.name
    if "images-idx3" not in name:
        raise ArgumentError(f"cannot infer label file for {images_path}; pass it explicitly")
    return images_path.with_name(name.replace("images-idx3", "labels-idx1"))


def load_idx(images_path: Path | str, labels_path: Path | str | None = None,
             split: str = "train", classes: int = 10) -> Dataset:
    images_path = Path(images_path)
    labels_path = Path(labels_path) if labels_path else _labels_path_for(images_path)
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3 or images.dtype != np.uint8:
        raise IdxFormatError(f"{images_path}: expected 3-dim uint8 images, got {images.dtype} {images.shape}")
    if labels.ndim != 1:
        raise IdxFormatError(f"{labels_path}: expected 1-dim labels, got shape {labels.shape}")
    logger.info("loaded %d %s images from %s", len(images), split, images_path)
    return Dataset(images, labels.astype(np.int64), split, classes)


def load_idx_dir(data_dir: Path | str, split: str = "train", classes: int = 10) -> Dataset:
    """MNIST file naming: ``train-images-idx3-ubyte[.gz]`` / ``t10k-images-idx3-ubyte[.gz]``."""
    data_dir = Path(data_dir)
    prefix = "train" if split == "train" else "t10k"
    for suffix in ("", ".gz"):
        candidate = data_dir / f"{prefix}-images-idx3-ubyte{suffix}"
        if candidate.exists():
            labels = data_dir / f"{prefix}-labels-idx1-ubyte{suffix}"
            return load_idx(candidate, labels, split, classes)
    raise IdxFormatError(f"no {prefix}-images-idx3-ubyte[.gz] in {data_dir}")


def write_idx(path: Path | str, array: np.ndarray) -> None:
    """Write an array as IDX (uint8 or int32); used for exporting datasets."""
    array = np.asarray(array)
    code = {np.dtype(np.uint8): 0x08, np.dtype(np.int32): 0x0C}.get(array.dtype)
    if code is None:
        raise ArgumentError(f"cannot write {array.dtype} as IDX")
    header = bytes([0, 0, code, array.ndim]) + np.asarray(array.shape, dtype=">u4").tobytes()
    body = array.astype(array.dtype.newbyteorder(">")).tobytes()
    try:
        Path(path).write_bytes(header + body)
    except OSError as e:
        raise OutputError(f"cannot write {path}: {e}") from e


def save_idx_dir(dataset: Dataset, data_dir: Path | str) -> tuple[Path, Path]:
    """Write ``dataset`` under MNIST file naming so ``load_idx_dir`` reads it back."""
    data_dir = Path(data_dir)
    prefix = "train" if dataset.split == "train" else "t10k"
    try:
        data_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OutputError(f"cannot create {data_dir}: {e}") from e
    images = data_dir / f"{prefix}-images-idx3-ubyte"
    labels = data_dir / f"{prefix}-labels-idx1-ubyte"
    write_idx(images, dataset.images.astype(np.uint8))
    write_idx(labels, dataset.labels.astype(np.uint8))
    logger.info("wrote %d %s samples to %s", len(dataset), dataset.split, data_dir)
    return images, labels


def _prototypes(seed: int, classes: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    protos = np.zeros((classes, size, size))
    for c in range(classes):
        rng = stream(seed, "prototype", c)
        for _ in range(3):
            cy, cx = rng.uniform(size * 0.2, size * 0.8, size=2)
            sigma = rng.uniform(1.5, 3.5)
            amp = rng.uniform(0.6, 1.0)
            protos[c] += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        protos[c] /= protos[c].max()
    return protos


def generate_synthetic(seed: int, classes: int = 10, count: int = 6000, split: str = "train",
                       size: int = 28) -> Dataset:
    """Seed-deterministic blob images; train and test splits share class prototypes."""
    if classes < 2 or count < 0:
        raise ArgumentError("need at least 2 classes and a non-negative count")
    protos = _prototypes(seed, classes, size)
    rng = stream(seed, "samples", split)
    labels = rng.integers(0, classes, size=count)
    shifts = rng.integers(-2, 3, size=(count, 2))
    gains = rng.uniform(0.8, 1.2, size=count)
    noise = rng.normal(0.0, 0.1, size=(count, size, size))
    images = np.empty((count, size, size), dtype=np.uint8)
    for i in range(count):
        img = np.roll(protos[labels[i]], tuple(shifts[i]), axis=(0, 1)) * gains[i] + noise[i]
        images[i] = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return Dataset(images, labels.astype(np.int64), split, classes)


def load_datasets(data_dir: Path | str | None, seed: int, train_count: int = 6000,
                  test_count: int = 1000, classes: int = 10) -> tuple[Dataset, Dataset]:
    """(train, test) from an MNIST-style directory, or synthetic when none is given."""
    if data_dir:
        return (load_idx_dir(data_dir, "train", classes),
                load_idx_dir(data_dir, "test", classes))
    logger.info("no data directory; generating synthetic data (seed %d)", seed)
    return (generate_synthetic(seed, classes, train_count, "train"),
            generate_synthetic(seed, classes, test_count, "test"))
