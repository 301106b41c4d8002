"""Datasets: MNIST IDX files, synthetic Gaussian clusters and equal-size iid shards."""

import gzip
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

logger = logging.getLogger("nbafl.data_io")

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

PathLike = Union[str, Path]


class IdxFormatError(ValueError):
    """Malformed IDX file: wrong magic, truncated payload or count mismatch."""


class InsufficientDataError(ValueError):
    """Requested more shard samples than the dataset holds."""


@dataclass(frozen=True)
class LabeledDataset:
    """Feature matrix (one row per sample) and integer labels in [0, n_classes)."""

    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.features.shape[0]:
            raise ValueError(
                f"{self.features.shape[0]} feature rows but labels of shape {self.labels.shape}"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return int(self.features.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])

    def take(self, indices: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.features[indices], self.labels[indices], self.n_classes)


@dataclass(frozen=True)
class Partition:
    """N disjoint index sets of exactly shard_size indices each."""

    shards: tuple
    shard_size: int

    def __post_init__(self):
        for shard in self.shards:
            if len(shard) != self.shard_size:
                raise ValueError(f"shard of size {len(shard)} != {self.shard_size}")
        flat = np.concatenate(self.shards) if self.shards else np.array([], dtype=np.int64)
        if np.unique(flat).size != flat.size:
            raise ValueError("shards overlap")

    @property
    def n_clients(self) -> int:
        return len(self.shards)


def _read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"IDX file not found: {path}")
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def load_idx(images_path: PathLike, labels_path: PathLike, n_classes: int = 10) -> LabeledDataset:
    """Parse a big-endian IDX image/label pair; pixels are scaled to [0, 1].

    Gzipped files (``.gz``) are read transparently.
    """
    raw_images = _read_bytes(images_path)
    raw_labels = _read_bytes(labels_path)

    if len(raw_images) < 16:
        raise IdxFormatError(f"{images_path}: truncated header")
    magic, n_images, rows, cols = struct.unpack(">IIII", raw_images[:16])
    if magic != IMAGE_MAGIC:
        raise IdxFormatError(f"{images_path}: magic mismatch 0x{magic:08x} != 0x{IMAGE_MAGIC:08x}")
    n_pixels = n_images * rows * cols
    if len(raw_images) < 16 + n_pixels:
        raise IdxFormatError(f"{images_path}: truncated, expected {n_pixels} pixel bytes")

    if len(raw_labels) < 8:
        raise IdxFormatError(f"{labels_path}: truncated header")
    magic, n_labels = struct.unpack(">II", raw_labels[:8])
    if magic != LABEL_MAGIC:
        raise IdxFormatError(f"{labels_path}: magic mismatch 0x{magic:08x} != 0x{LABEL_MAGIC:08x}")
    if len(raw_labels) < 8 + n_labels:
        raise IdxFormatError(f"{labels_path}: truncated, expected {n_labels} labels")
    if n_labels != n_images:
        raise IdxFormatError(f"count mismatch: {n_images} images vs {n_labels} labels")

    pixels = np.frombuffer(raw_images, dtype=np.uint8, count=n_pixels, offset=16)
    features = pixels.reshape(n_images, rows * cols).astype(np.float64) / 255.0
    labels = np.frombuffer(raw_labels, dtype=np.uint8, count=n_labels, offset=8).astype(np.int64)
    if labels.size and labels.max() >= n_classes:
        raise IdxFormatError(f"{labels_path}: label {labels.max()} outside [0, {n_classes})")

    logger.info(f"Loaded {n_images} samples of {rows * cols} features from {images_path}")
    return LabeledDataset(features, labels, n_classes)


def write_idx(data: LabeledDataset, images_path: PathLike, labels_path: PathLike) -> None:
    """Write a dataset with features in [0, 1] as an IDX pair (pixels rounded to bytes)."""
    n, d = data.features.shape
    side = math.isqrt(d)
    rows, cols = (side, side) if side * side == d else (1, d)
    pixels = np.clip(np.rint(data.features * 255.0), 0, 255).astype(np.uint8)
    Path(images_path).write_bytes(
        struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + pixels.tobytes()
    )
    Path(labels_path).write_bytes(
        struct.pack(">II", LABEL_MAGIC, n) + data.labels.astype(np.uint8).tobytes()
    )


def synth_classification(
    n: int, d: int, classes: int, margin: float, rng: np.random.Generator
) -> LabeledDataset:
    """Balanced Gaussian clusters; class means sit at distance ``margin`` from the origin."""
    if n < 1 or d < 1 or classes < 1:
        raise ValueError("n, d and classes must be positive")
    directions = rng.normal(size=(classes, d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = margin * directions
    labels = rng.permutation(np.arange(n) % classes)
    features = means[labels] + rng.normal(size=(n, d))
    return LabeledDataset(features, labels.astype(np.int64), classes)


def partition_iid(data: LabeledDataset, N: int, m: int, rng: np.random.Generator) -> Partition:
    """Cut a uniform random permutation into N shards of exactly m; the tail is dropped."""
    if N < 1 or m < 1:
        raise ValueError(f"N and m must be positive, got N={N}, m={m}")
    if N * m > len(data):
        raise InsufficientDataError(f"need N*m={N * m} samples, dataset has {len(data)}")
    perm = rng.permutation(len(data))
    shards = tuple(perm[i * m : (i + 1) * m] for i in range(N))
    discarded = len(data) - N * m
    if discarded:
        logger.debug(f"Partition discards {discarded} samples")
    return Partition(shards=shards, shard_size=m)


def subset(data: LabeledDataset, n: int, rng: np.random.Generator) -> LabeledDataset:
    """Uniform random subset of n rows."""
    if n > len(data):
        raise InsufficientDataError(f"need {n} samples, dataset has {len(data)}")
    return data.take(rng.permutation(len(data))[:n])


def union(data: LabeledDataset, partition: Partition) -> LabeledDataset:
    """The union of all shards, in shard order."""
    return data.take(np.concatenate(partition.shards))
