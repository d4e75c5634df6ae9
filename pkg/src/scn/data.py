"""Dataset parsers (MNIST IDX, CIFAR binary) and per-pixel-mean preprocessing."""

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .exceptions import FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

CIFAR_IMAGE_BYTES = 3 * 32 * 32


@dataclass(frozen=True)
class Dataset:
    """Raw images in [0, 1] plus labels; ``per_pixel_mean`` comes from the train split."""

    images: np.ndarray          # (N, C, H, W) float32
    labels: np.ndarray          # (N,) int64
    split: str
    class_count: int
    per_pixel_mean: np.ndarray = None

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise FormatError(f"{self.split}: {len(self.images)} images for {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise FormatError(f"{self.split}: labels outside [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def with_mean(self, mean):
        return Dataset(self.images, self.labels, self.split, self.class_count, mean)

    def subset(self, indices):
        idx = np.asarray(indices)
        return Dataset(self.images[idx], self.labels[idx], self.split, self.class_count, self.per_pixel_mean)

    def centered(self, indices=None):
        """Images in float64 with the per-pixel mean removed."""
        x = self.images if indices is None else self.images[indices]
        x = x.astype(np.float64)
        if self.per_pixel_mean is not None:
            x -= self.per_pixel_mean
        return x


def compute_per_pixel_mean(images):
    """Elementwise mean image of an (N, C, H, W) stack, in float64."""
    images = np.asarray(images)
    if len(images) == 0:
        raise FormatError("cannot average an empty image set")
    return images.mean(axis=0, dtype=np.float64)


def streaming_per_pixel_mean(batches):
    """Same as :func:`compute_per_pixel_mean` but over an iterable of chunks."""
    total, count = None, 0
    for chunk in batches:
        chunk = np.asarray(chunk, dtype=np.float64)
        s = chunk.sum(axis=0)
        total = s if total is None else total + s
        count += len(chunk)
    if not count:
        raise FormatError("cannot average an empty image set")
    return total / count


# -------------------------------------------------------------------- MNIST

def _read_bytes(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def _find(directory, name):
    for candidate in (name, name + ".gz", name.replace("-idx", ".idx")):
        path = os.path.join(directory, candidate)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"missing dataset file {os.path.join(directory, name)}")


def parse_idx(data, expected_magic, path="<bytes>"):
    """Decode a big-endian IDX blob of unsigned bytes into an array."""
    if len(data) < 4:
        raise FormatError(f"{path}: truncated header at offset 0: expected 4 bytes, got {len(data)}")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError(f"{path}: truncated header: expected {header} bytes, got {len(data)}")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    need = header + int(np.prod(dims))
    if len(data) != need:
        raise FormatError(f"{path}: expected {need} bytes for shape {dims}, got {len(data)}")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def load_mnist(directory):
    """Return ``(train, test)`` datasets of 1x28x28 images in [0, 1].

    Both splits carry the training per-pixel mean.
    """
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"dataset directory not found: {directory}")
    splits = {}
    for split, (img_name, lbl_name) in MNIST_FILES.items():
        ipath, lpath = _find(directory, img_name), _find(directory, lbl_name)
        images = parse_idx(_read_bytes(ipath), IDX_IMAGES_MAGIC, ipath)
        labels = parse_idx(_read_bytes(lpath), IDX_LABELS_MAGIC, lpath)
        if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
            raise FormatError(f"{ipath}: {images.shape} images do not match {labels.shape} labels")
        x = (images.astype(np.float32) / 255.0)[:, None]
        splits[split] = Dataset(x, labels.astype(np.int64), split, 10)
    mean = compute_per_pixel_mean(splits["train"].images)
    return splits["train"].with_mean(mean), splits["test"].with_mean(mean)


# -------------------------------------------------------------------- CIFAR

def parse_cifar_records(data, label_bytes, label_index, path="<bytes>"):
    """Split a CIFAR binary file into ``(images uint8 (N,3,32,32), labels)``."""
    record = label_bytes + CIFAR_IMAGE_BYTES
    if len(data) == 0 or len(data) % record:
        raise FormatError(f"{path}: {len(data)} bytes is not a whole number of "
                          f"{record}-byte records")
    rows = np.frombuffer(data, dtype=np.uint8).reshape(-1, record)
    labels = rows[:, label_index].astype(np.int64)
    images = rows[:, label_bytes:].reshape(-1, 3, 32, 32)
    return images, labels


def encode_cifar_record(image, labels):
    """Inverse of the parser for one record (``labels`` is a tuple of ints)."""
    return bytes(labels) + np.asarray(image, dtype=np.uint8).tobytes()


def load_cifar(directory, classes=10, check_counts=True):
    """Return ``(train, test)`` CIFAR datasets of 3x32x32 images in [0, 1].

    CIFAR-10 reads ``data_batch_1..5.bin`` and ``test_batch.bin`` (one
    label byte per record); CIFAR-100 reads ``train.bin`` and ``test.bin``
    (coarse then fine label byte; the fine label is used). With
    ``check_counts`` the split sizes must be the official 50,000 / 10,000.
    """
    if classes not in (10, 100):
        raise ValueError(f"classes must be 10 or 100, got {classes}")
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"dataset directory not found: {directory}")
    if classes == 10:
        layout = {"train": [f"data_batch_{i}.bin" for i in range(1, 6)], "test": ["test_batch.bin"]}
        label_bytes, label_index, expected = 1, 0, {"train": 50000, "test": 10000}
    else:
        layout = {"train": ["train.bin"], "test": ["test.bin"]}
        label_bytes, label_index, expected = 2, 1, {"train": 50000, "test": 10000}
    splits = {}
    for split, names in layout.items():
        imgs, lbls = [], []
        for name in names:
            path = os.path.join(directory, name)
            if not os.path.exists(path):
                raise FileNotFoundError(f"missing dataset file {path}")
            i, l = parse_cifar_records(_read_bytes(path), label_bytes, label_index, path)
            imgs.append(i)
            lbls.append(l)
        images, labels = np.concatenate(imgs), np.concatenate(lbls)
        if check_counts and len(images) != expected[split]:
            raise FormatError(f"{directory}: {split} split has {len(images)} records, "
                              f"expected {expected[split]}")
        splits[split] = Dataset(images.astype(np.float32) / 255.0, labels, split, classes)
    mean = compute_per_pixel_mean(splits["train"].images)
    return splits["train"].with_mean(mean), splits["test"].with_mean(mean)


# ---------------------------------------------------------------- synthetic

def synthetic_dataset(n, shape=(1, 8, 8), classes=3, seed=0, split="train"):
    """Separable toy data: each class is a fixed random template plus noise."""
    rng = np.random.default_rng(seed)
    templates = rng.uniform(0.0, 1.0, size=(classes,) + tuple(shape))
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    noise = rng.uniform(-0.1, 0.1, size=(n,) + tuple(shape))
    images = np.clip(templates[labels] + noise, 0.0, 1.0).astype(np.float32)
    return Dataset(images, labels.astype(np.int64), split, classes)


def load_dataset(name, directory, classes=None):
    """Dispatch on a dataset name used in config files."""
    if name == "mnist":
        return load_mnist(directory)
    if name == "cifar10":
        return load_cifar(directory, 10)
    if name == "cifar100":
        return load_cifar(directory, 100)
    raise ValueError(f"unknown dataset {name!r}")
