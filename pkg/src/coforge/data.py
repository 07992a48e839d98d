"""CIFAR-10 binary loading, stratified subsets and synthetic test data.

Pixels are stored as float32 in [0, 1]; normalization happens inside the model.
No download logic: place the ``cifar-10-batches-bin`` directory (the six
``*.bin`` batch files) somewhere and pass its path.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptDataError, LabelRangeError, MissingDataError

RECORD_BYTES = 1 + 3 * 32 * 32
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILES = ("test_batch.bin",)


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: str = "train"
    name: str = "cifar10"
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, indices, name: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.split, name or self.name, self.num_classes)

    def head(self, n: int | None) -> "Dataset":
        if n is None or n >= len(self):
            return self
        return self.take(np.arange(n))

    def batches(self, batch_size: int, order=None):
        order = np.arange(len(self)) if order is None else order
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            yield self.images[idx], self.labels[idx]


def read_cifar_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse one CIFAR-10 binary batch: records of 1 label byte + 3x1024 channel-planar pixels."""
    path = Path(path)
    if not path.is_file():
        raise MissingDataError(f"CIFAR-10 batch file not found: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % RECORD_BYTES:
        raise CorruptDataError(f"{path}: size {raw.size} is not a multiple of {RECORD_BYTES}")
    records = raw.reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise LabelRangeError(f"{path}: record {bad} has label {labels[bad]} outside 0..9")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255)
    return images, labels


def write_cifar_batch(path, images_u8: np.ndarray, labels) -> Path:
    """Write uint8 (N, 3, 32, 32) images in the CIFAR-10 binary layout (fixtures, tests)."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images_u8], axis=1)
    path = Path(path)
    path.write_bytes(rec.tobytes())
    return path


def _load_split(directory: Path, files, split: str) -> Dataset:
    parts = [read_cifar_batch(directory / f) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return Dataset(images, labels, split, "cifar10")


def load_cifar10(directory) -> tuple[Dataset, Dataset]:
    """Load (train, test) from a ``cifar-10-batches-bin`` directory, in file order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingDataError(f"CIFAR-10 directory not found: {directory}")
    return _load_split(directory, TRAIN_FILES, "train"), _load_split(directory, TEST_FILES, "test")


def subset(dataset: Dataset, n: int, seed: int = 0) -> Dataset:
    """Class-stratified deterministic sample of ``n`` items, shuffled by ``seed``.

    Each class gets ``n // K`` items, the remainder going one each to the lowest
    class indices. If a class runs short, its deficit moves to the next classes
    (by index) that still have spare samples.
    """
    k = dataset.num_classes
    if n < k:
        raise ValueError(f"subset size {n} is smaller than the number of classes {k}")
    if n > len(dataset):
        raise ValueError(f"subset size {n} exceeds dataset size {len(dataset)}")
    rng = np.random.default_rng(seed)
    pools = [rng.permutation(np.flatnonzero(dataset.labels == c)) for c in range(k)]
    quota = [n // k + (1 if c < n % k else 0) for c in range(k)]
    take = [min(q, len(p)) for q, p in zip(quota, pools)]
    deficit = n - sum(take)
    for c in range(k):
        if deficit == 0:
            break
        extra = min(deficit, len(pools[c]) - take[c])
        take[c] += extra
        deficit -= extra
    chosen = np.concatenate([p[:t] for p, t in zip(pools, take)])
    chosen = chosen[rng.permutation(len(chosen))]
    return dataset.take(chosen, name=f"{dataset.name}[{n}]")


def _prototypes(rng: np.random.Generator, num_classes: int, shape) -> np.ndarray:
    """Per-class colour offset plus an oriented grating, scaled to unit std.

    Colour survives global pooling and gratings survive random crops, so both a
    linear probe and a small CNN can separate the classes.
    """
    c, h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    protos = np.empty((num_classes, c, h, w))
    for k in range(num_classes):
        theta = np.pi * k / num_classes + rng.uniform(0, np.pi / num_classes)
        freq = rng.uniform(2, 5) / max(h, w)
        wave = np.cos(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + rng.uniform(0, 2 * np.pi))
        colour = rng.standard_normal(c)
        mix = rng.standard_normal(c)
        protos[k] = colour[:, None, None] + mix[:, None, None] * wave
    return (protos / protos.std()).astype(np.float32)


def synthetic_dataset(
    n: int,
    num_classes: int = 10,
    seed: int = 0,
    snr: float = 5.0,
    shape=(3, 32, 32),
    amplitude: float = 0.15,
    split: str = "train",
) -> Dataset:
    """Class-conditional Gaussian blobs around fixed per-class prototypes.

    ``image = clip(0.5 + amplitude * (prototype[label] + noise / snr), 0, 1)``
    with standard-normal noise. Prototypes depend only on
    ``(seed, num_classes, shape)`` so train/test splits drawn with different
    ``split`` names share them.
    """
    if n < num_classes:
        raise ValueError(f"need n >= num_classes, got {n} < {num_classes}")
    protos = _prototypes(np.random.default_rng([seed, num_classes, 0x5EED]), num_classes, tuple(shape))
    rng = np.random.default_rng([seed, num_classes, len(split), sum(map(ord, split))])
    labels = rng.permutation(np.arange(n) % num_classes).astype(np.int64)
    noise = rng.standard_normal((n, *shape)).astype(np.float32)
    images = np.float32(0.5) + np.float32(amplitude) * (protos[labels] + noise / np.float32(snr))
    return Dataset(np.clip(images, 0, 1).astype(np.float32), labels, split, "synthetic", num_classes)
