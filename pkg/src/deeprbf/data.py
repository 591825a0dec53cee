"""Dataset ingestion and synthesis: IDX image files, the three-cluster 2-D
toy problem, and rubbish noise images.

Image pixel values are normalized to [0, 1]; toy inputs are raw plane
coordinates.  Loading preserves file record order, so sample i is record i.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """An IDX file failed validation; nothing partial is returned."""


@dataclass
class Dataset:
    """Samples plus integer labels and a split tag."""
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.images.shape[0]} samples vs {self.labels.shape[0]} labels")

    def __len__(self):
        return self.images.shape[0]

    def subset(self, index, split=None):
        return Dataset(self.images[index], self.labels[index],
                       split if split is not None else self.split)


def _read_exact(f, count, path, what):
    data = f.read(count)
    if len(data) != count:
        raise IdxFormatError(f"{path}: truncated file while reading {what} "
                             f"({len(data)} of {count} bytes)")
    return data


def load_mnist_idx(image_path, label_path):
    """Load an IDX image/label file pair into a Dataset.

    Headers are big-endian; pixels are rescaled from 0..255 to [0, 1].
    Bad magic numbers, truncation and image/label count mismatches each
    raise :class:`IdxFormatError` before any data is returned.
    """
    with open(image_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, image_path, "header"))
        if magic != IDX_IMAGE_MAGIC:
            raise IdxFormatError(
                f"{image_path}: bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")
        raw = _read_exact(f, count * rows * cols, image_path, "pixel data")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(count, 1, rows, cols)
    with open(label_path, "rb") as f:
        magic, label_count = struct.unpack(">II", _read_exact(f, 8, label_path, "header"))
        if magic != IDX_LABEL_MAGIC:
            raise IdxFormatError(
                f"{label_path}: bad label magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}")
        labels = np.frombuffer(_read_exact(f, label_count, label_path, "labels"),
                               dtype=np.uint8)
    if count != label_count:
        raise IdxFormatError(
            f"image count {count} != label count {label_count} "
            f"({image_path} vs {label_path})")
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64))


def write_mnist_idx(dataset, image_path, label_path):
    """Write a Dataset of [0,1] images back to an IDX file pair."""
    images = np.clip(np.round(dataset.images * 255.0), 0, 255).astype(np.uint8)
    n, _, rows, cols = images.shape
    with open(image_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with open(label_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


@dataclass
class ToyConfig:
    """Three isotropic Gaussian clusters in the plane.

    Defaults place the means on an equilateral triangle of side 4.
    """
    means: tuple = ((0.0, 2.3094010767585034),
                    (-2.0, -1.1547005383792517),
                    (2.0, -1.1547005383792517))
    std: float = 0.5
    samples_per_cluster: int = 300
    seed: int = 0

    def __post_init__(self):
        if len(self.means) != 3:
            raise ValueError("the toy problem has exactly three classes")


def toy_generate(config: ToyConfig):
    """Sample the toy dataset; deterministic for a fixed seed."""
    rng = np.random.default_rng(config.seed)
    points, labels = [], []
    for k, mean in enumerate(config.means):
        pts = rng.normal(loc=mean, scale=config.std,
                         size=(config.samples_per_cluster, 2))
        points.append(pts)
        labels.append(np.full(config.samples_per_cluster, k))
    return Dataset(np.concatenate(points), np.concatenate(labels))


def rubbish_generate(count, seed=0, shape=(1, 28, 28)):
    """Structureless noise images: N(0.5, 0.1^2) pixels clamped to [0, 1]."""
    if count <= 0:
        raise ValueError("count must be positive")
    rng = np.random.default_rng(seed)
    return np.clip(rng.normal(0.5, 0.1, size=(count,) + tuple(shape)), 0.0, 1.0)


def split(dataset, validation_fraction, seed=0, shuffle=False):
    """Split into (train, validation): disjoint, exhaustive, deterministic.

    By default the validation set is the trailing fraction of the file
    order; with ``shuffle`` a seeded permutation is applied first.
    """
    if not 0.0 < validation_fraction < 1.0:
        raise ValueError(f"validation fraction must be in (0,1), got {validation_fraction}")
    n = len(dataset)
    n_val = int(round(n * validation_fraction))
    order = (np.random.default_rng(seed).permutation(n) if shuffle
             else np.arange(n))
    val_idx, train_idx = order[n - n_val:], order[:n - n_val]
    return (dataset.subset(train_idx, "train"), dataset.subset(val_idx, "val"))
