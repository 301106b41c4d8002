"""Tests for IDX parsing, synthetic data and partitioning."""

import gzip
import struct

import numpy as np
import pytest

from nbafl.data_io import (
    IMAGE_MAGIC,
    LABEL_MAGIC,
    IdxFormatError,
    InsufficientDataError,
    LabeledDataset,
    Partition,
    load_idx,
    partition_iid,
    subset,
    synth_classification,
    union,
    write_idx,
)
from nbafl.rng import stream


@pytest.fixture
def tiny():
    rng = np.random.default_rng(0)
    features = rng.integers(0, 256, size=(12, 16)) / 255.0
    return LabeledDataset(features, np.arange(12) % 10, 10)


@pytest.fixture
def idx_pair(tmp_path, tiny):
    images, labels = tmp_path / "images.idx", tmp_path / "labels.idx"
    write_idx(tiny, images, labels)
    return images, labels


class TestIdx:
    """Test IDX reading."""

    def test_fixture_round_trip(self, tiny, idx_pair):
        """A written pair reads back with the same pixels and labels."""
        data = load_idx(*idx_pair)
        assert data.features.shape == (12, 16)
        assert np.allclose(data.features, tiny.features, atol=0.5 / 255)
        assert np.array_equal(data.labels, tiny.labels)
        assert data.features.min() >= 0.0 and data.features.max() <= 1.0

    def test_gzip(self, tmp_path, idx_pair):
        """Gzipped files are read transparently."""
        images, labels = idx_pair
        gz_images = tmp_path / "images.idx.gz"
        gz_images.write_bytes(gzip.compress(images.read_bytes()))
        assert len(load_idx(gz_images, labels)) == 12

    def test_magic_mismatch(self, tmp_path, idx_pair):
        """Wrong magic numbers are rejected."""
        images, labels = idx_pair
        raw = bytearray(images.read_bytes())
        raw[:4] = struct.pack(">I", LABEL_MAGIC)
        images.write_bytes(bytes(raw))
        with pytest.raises(IdxFormatError, match="magic"):
            load_idx(images, labels)

    def test_truncated_images(self, idx_pair):
        """Missing pixel bytes are detected."""
        images, labels = idx_pair
        images.write_bytes(images.read_bytes()[:-5])
        with pytest.raises(IdxFormatError, match="truncated"):
            load_idx(images, labels)

    def test_truncated_header(self, idx_pair):
        """A header shorter than 16 bytes is rejected."""
        images, labels = idx_pair
        images.write_bytes(images.read_bytes()[:10])
        with pytest.raises(IdxFormatError):
            load_idx(images, labels)

    def test_count_mismatch(self, tmp_path, idx_pair):
        """Image and label counts must agree."""
        images, _ = idx_pair
        labels = tmp_path / "short.idx"
        labels.write_bytes(struct.pack(">II", LABEL_MAGIC, 11) + bytes(11))
        with pytest.raises(IdxFormatError, match="count mismatch"):
            load_idx(images, labels)

    def test_missing_file(self, tmp_path, idx_pair):
        """Missing files raise FileNotFoundError."""
        with pytest.raises(FileNotFoundError):
            load_idx(tmp_path / "nope", idx_pair[1])

    def test_header_constants(self):
        """IDX magic numbers."""
        assert IMAGE_MAGIC == 2051
        assert LABEL_MAGIC == 2049


class TestPartition:
    """Test iid sharding."""

    def test_equal_disjoint_shards(self):
        """60000 samples into 50 shards of 1000: disjoint, 10000 discarded."""
        data = LabeledDataset(np.zeros((60000, 1)), np.zeros(60000, dtype=np.int64), 10)
        partition = partition_iid(data, 50, 1000, stream(0, "partition"))
        assert partition.n_clients == 50
        assert all(len(s) == 1000 for s in partition.shards)
        flat = np.concatenate(partition.shards)
        assert np.unique(flat).size == 50000
        assert len(union(data, partition)) == 50000

    def test_exact_fit(self, tiny):
        """N * m equal to the dataset size uses every sample."""
        partition = partition_iid(tiny, 3, 4, stream(0, "partition"))
        assert sorted(np.concatenate(partition.shards).tolist()) == list(range(12))

    def test_insufficient(self, tiny):
        """N * m larger than the dataset is refused."""
        with pytest.raises(InsufficientDataError):
            partition_iid(tiny, 5, 3, stream(0, "partition"))

    def test_deterministic(self, tiny):
        """Same stream key, same shards."""
        a = partition_iid(tiny, 3, 3, stream(9, "partition"))
        b = partition_iid(tiny, 3, 3, stream(9, "partition"))
        assert all(np.array_equal(x, y) for x, y in zip(a.shards, b.shards))

    def test_overlap_rejected(self):
        """Hand-built partitions must not overlap."""
        with pytest.raises(ValueError, match="overlap"):
            Partition(shards=(np.array([0, 1]), np.array([1, 2])), shard_size=2)


class TestSynthetic:
    """Test synthetic Gaussian clusters."""

    def test_shape_and_balance(self):
        """Labels are balanced across classes."""
        data = synth_classification(300, 4, 3, 2.0, stream(1, "synth"))
        assert data.features.shape == (300, 4)
        assert np.bincount(data.labels).tolist() == [100, 100, 100]

    def test_deterministic(self):
        """The same stream key regenerates the same data."""
        a = synth_classification(50, 3, 2, 1.0, stream(1, "synth"))
        b = synth_classification(50, 3, 2, 1.0, stream(1, "synth"))
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels)

    def test_margin_separates_means(self):
        """Class means sit near distance margin from the origin."""
        data = synth_classification(20000, 2, 2, 5.0, stream(2, "synth"))
        for k in range(2):
            centre = data.features[data.labels == k].mean(axis=0)
            assert np.linalg.norm(centre) == pytest.approx(5.0, abs=0.1)

    def test_subset(self, tiny):
        """Subsets draw distinct rows."""
        part = subset(tiny, 5, stream(0, "subset"))
        assert len(part) == 5
        with pytest.raises(InsufficientDataError):
            subset(tiny, 13, stream(0, "subset"))

    def test_label_range_checked(self):
        """Labels outside [0, n_classes) are rejected."""
        with pytest.raises(ValueError):
            LabeledDataset(np.zeros((2, 1)), np.array([0, 3]), 3)
