"""Bag construction for learning from label proportions.

A labeled dataset is shuffled once with a seeded PCG64 generator and cut
into consecutive blocks of ``bag_size`` instances. Only each block's label
proportions are kept on the bag; the source labels stay on the dataset for
evaluation.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class LabeledDataset:
    """Features ``(N, d)`` with 0-based integer labels ``(N,)``."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        features = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {features.shape}")
        if labels.ndim != 1 or labels.shape[0] != features.shape[0]:
            raise ValueError("features and labels must have equal length")
        if labels.shape[0] < 1:
            raise ValueError("dataset must contain at least one instance")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes - 1}]")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[indices], self.labels[indices], self.num_classes)

    def content_hash(self):
        """SHA-256 over class count, shape, features and labels."""
        h = hashlib.sha256()
        h.update(np.array([self.num_classes, *self.features.shape], dtype="<i8").tobytes())
        h.update(self.features.astype("<f8").tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True, eq=False)
class Bag:
    instance_indices: tuple
    proportions: np.ndarray

    @property
    def size(self):
        return len(self.instance_indices)

    def __eq__(self, other):
        if not isinstance(other, Bag):
            return NotImplemented
        return (self.instance_indices == other.instance_indices
                and np.array_equal(self.proportions, other.proportions))

    def __hash__(self):
        return hash(self.instance_indices)


@dataclass(frozen=True)
class BagDataset:
    bags: tuple
    source: LabeledDataset
    bag_size: int
    seed: int

    def __len__(self):
        return len(self.bags)

    @property
    def num_classes(self):
        return self.source.num_classes

    def features_of(self, bag):
        return self.source.features[list(bag.instance_indices)]


def compute_proportions(labels, num_classes):
    """Per-class label frequencies of a bag.

    Examples
    --------
    >>> compute_proportions([1, 1, 1, 0], 4)
    array([0.25, 0.75, 0.  , 0.  ])
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("cannot compute proportions of an empty bag")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels must lie in [0, {num_classes - 1}]")
    counts = np.bincount(labels, minlength=num_classes)
    # count / n is the correctly rounded quotient, so entries are exact multiples of 1/n
    return counts / labels.size


def make_bags(ds: LabeledDataset, bag_size: int, seed: int) -> BagDataset:
    """Partition a shuffled dataset into ``len(ds) // bag_size`` bags.

    Leftover instances after the last full bag are dropped, so every bag
    has exactly ``bag_size`` members.
    """
    n_total = len(ds)
    if bag_size < 1 or bag_size > n_total:
        raise ValueError(f"bag_size must be in [1, {n_total}], got {bag_size}")
    if seed < 0 or seed >= 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(n_total)
    num_bags = n_total // bag_size
    bags = []
    for b in range(num_bags):
        members = perm[b * bag_size:(b + 1) * bag_size]
        props = compute_proportions(ds.labels[members], ds.num_classes)
        props.setflags(write=False)
        bags.append(Bag(tuple(int(i) for i in members), props))
    return BagDataset(tuple(bags), ds, bag_size, seed)


def save_bags(bds: BagDataset, path):
    """Write bags as JSON lines: one header line, then one line per bag."""
    header = {
        "bag_size": bds.bag_size,
        "seed": bds.seed,
        "num_classes": bds.num_classes,
        "dataset_hash": bds.source.content_hash(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for bag in bds.bags:
            row = {"instances": list(bag.instance_indices),
                   "proportions": [float(p) for p in bag.proportions]}
            fh.write(json.dumps(row) + "\n")


def load_bags(path, source: LabeledDataset) -> BagDataset:
    """Read a bag file written by :func:`save_bags` against its source dataset."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"{path}: empty bag file")
    header = json.loads(lines[0])
    if header.get("dataset_hash") != source.content_hash():
        raise ValueError(f"{path}: bag file was built from a different dataset")
    if header.get("num_classes") != source.num_classes:
        raise ValueError(f"{path}: class count mismatch")
    bags = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        row = json.loads(line)
        idx = tuple(int(i) for i in row["instances"])
        if not idx or min(idx) < 0 or max(idx) >= len(source):
            raise ValueError(f"{path}:{lineno}: instance index out of range")
        props = np.asarray(row["proportions"], dtype=np.float64)
        if props.shape != (source.num_classes,):
            raise ValueError(f"{path}:{lineno}: proportions have wrong length")
        props.setflags(write=False)
        bags.append(Bag(idx, props))
    return BagDataset(tuple(bags), source, int(header["bag_size"]), int(header["seed"]))
