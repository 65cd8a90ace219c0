"""Synthetic classification data and iid / non-iid client partitioning."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels differ in length")

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass
class PartitionSpec:
    mode: str = "noniid"  # "iid" or "noniid"
    per_client_size: int = 500
    primary_fraction: float = 0.8
    test_fraction: float = 0.1

    def validate(self) -> None:
        if self.mode not in ("iid", "noniid"):
            raise ValueError(f"unknown partition mode {self.mode!r}")
        if not 0.0 < self.primary_fraction < 1.0:
            raise ValueError("primary_fraction must be in (0, 1)")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must be in (0, 1)")
        if self.per_client_size < 2:
            raise ValueError("per_client_size must be at least 2")


@dataclass
class ClientShard:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    primary_label: Optional[int] = None
    # dataset indices, kept for inspection
    train_index: Optional[np.ndarray] = None
    test_index: Optional[np.ndarray] = None


def simplex_means(C: int, m: int, separation: float) -> np.ndarray:
    """C points in R^m with all pairwise distances equal to ``separation``."""
    if m < C:
        raise ValueError(f"feature dim m={m} must be at least the class count C={C}")
    eye = np.eye(C, m)
    centered = eye - eye.mean(axis=0)
    return centered * (separation / np.sqrt(2.0))


def gen_synthetic(C: int, m: int, n: int, separation: float, rng: np.random.Generator) -> LabeledDataset:
    """Unit-variance Gaussian clusters around equidistant class means; labels balanced."""
    if C < 2 or n < C:
        raise ValueError("need C >= 2 and n >= C")
    means = simplex_means(C, m, separation)
    labels = rng.permutation(np.arange(n) % C)
    features = means[labels] + rng.standard_normal((n, m))
    return LabeledDataset(features=features, labels=labels.astype(np.int64), n_classes=C)


def _draw(pool: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    # without replacement inside one client while the pool allows it
    if size == 0:
        return pool[:0]
    if pool.size == 0:
        raise ValueError("cannot draw from an empty pool")
    return rng.choice(pool, size=size, replace=pool.size < size)


def partition(
    dataset: LabeledDataset,
    K: int,
    spec: PartitionSpec,
    rng: np.random.Generator,
) -> list[ClientShard]:
    """Give every client a shard of ``per_client_size`` examples and reserve a test split.

    Clients sample independently, so shards of different clients may overlap.
    In non-iid mode each client gets a uniformly drawn primary label that
    supplies ``round(primary_fraction * size)`` of its examples; the rest
    come uniformly from examples of the other labels.
    """
    spec.validate()
    if K < 1:
        raise ValueError("K must be positive")
    size = spec.per_client_size
    labels = dataset.labels
    classes = np.unique(labels)
    by_label = {int(c): np.flatnonzero(labels == c) for c in classes}
    everything = np.arange(len(dataset))
    n_test = int(round(spec.test_fraction * size))
    if not 0 < n_test < size:
        raise ValueError("test split would leave an empty train or test shard")

    shards = []
    for _ in range(K):
        primary = None
        if spec.mode == "iid":
            idx = _draw(everything, size, rng)
        else:
            primary = int(rng.choice(classes))
            if classes.size == 1:
                idx = _draw(by_label[primary], size, rng)
            else:
                n_primary = int(round(spec.primary_fraction * size))
                others = everything[labels != primary]
                idx = np.concatenate([_draw(by_label[primary], n_primary, rng), _draw(others, size - n_primary, rng)])
        idx = rng.permutation(idx)
        test_idx, train_idx = idx[:n_test], idx[n_test:]
        shards.append(
            ClientShard(
                train_x=dataset.features[train_idx],
                train_y=labels[train_idx],
                test_x=dataset.features[test_idx],
                test_y=labels[test_idx],
                primary_label=primary,
                train_index=train_idx,
                test_index=test_idx,
            )
        )
    return shards


def export_csv(shard: ClientShard, path, split: str = "train") -> Path:
    """Write one split as CSV: ``x0..x{m-1}`` feature columns, then ``label``."""
    if split not in ("train", "test"):
        raise ValueError("split must be 'train' or 'test'")
    x = shard.train_x if split == "train" else shard.test_x
    y = shard.train_y if split == "train" else shard.test_y
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{j}" for j in range(x.shape[1])] + ["label"])
        for row, label in zip(x, y):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])
    return path
