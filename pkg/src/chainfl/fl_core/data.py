"""Datasets and client partitioning."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# image benchmarks are accepted by name and mapped to synthetic blobs of a
# comparable label space: (n_classes, n_features, n_samples)
STAND_INS = {
    "cifar10": (10, 64, 3000),
    "cifar100": (100, 64, 6000),
    "fashionmnist": (10, 49, 3000),
}
SYNTHETIC_NAMES = ("blobs", "synthetic")


class TooFewSamples(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray  # (n, n_features) float64
    y: np.ndarray  # (n,) int64
    n_classes: int

    def __len__(self) -> int:
        return len(self.y)

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.n_classes)


@dataclass(frozen=True)
class DatasetPartition:
    assignments: dict[int, np.ndarray]

    def sizes(self) -> list[int]:
        return [len(self.assignments[c]) for c in sorted(self.assignments)]


def make_blobs(n_samples: int, n_features: int, n_classes: int,
               separation: float = 4.0, seed: int = 0) -> Dataset:
    """Gaussian blobs with unit noise around centers ``separation`` from the origin."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_classes, n_features))
    centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True)
    y = rng.permutation(np.arange(n_samples) % n_classes)
    X = centers[y] + rng.normal(size=(n_samples, n_features))
    return Dataset(X, y.astype(np.int64), n_classes)


def load_csv(path) -> Dataset:
    """Header row, feature columns, integer label in the last column."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValueError(f"{path}: need a header row and at least one sample")
    body = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=np.float64)
    labels = body[:, -1]
    if not np.all(labels == np.round(labels)) or labels.min() < 0:
        raise ValueError(f"{path}: last column must hold non-negative integer labels")
    y = labels.astype(np.int64)
    return Dataset(body[:, :-1], y, int(y.max()) + 1)


def train_test_split(data: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    n_test = int(round(len(data) * test_fraction))
    perm = np.random.default_rng([seed, 7]).permutation(len(data))
    return data.subset(np.sort(perm[n_test:])), data.subset(np.sort(perm[:n_test]))


def load_task_data(global_args) -> tuple[Dataset, Dataset]:
    """Build (train, test) for a config's ``global_args``."""
    name = global_args.dataset
    if name == "csv":
        if not global_args.data_path:
            raise ValueError("dataset 'csv' requires global_args.data_path")
        data = load_csv(global_args.data_path)
    elif name in STAND_INS:
        classes, features, samples = STAND_INS[name]
        data = make_blobs(samples, features, classes, global_args.separation, global_args.seed)
    elif name in SYNTHETIC_NAMES:
        data = make_blobs(global_args.n_samples, global_args.n_features,
                          global_args.n_classes, global_args.separation, global_args.seed)
    else:
        raise ValueError(f"unknown dataset {name!r}")
    return train_test_split(data, global_args.test_fraction, global_args.seed)


def split_dataset(labels, n_clients: int, strategy: str = "iid", seed: int = 0,
                  alpha: float = 0.5) -> DatasetPartition:
    """Assign sample indices to clients.

    ``iid`` shuffles and cuts into near-equal contiguous chunks.  ``dirichlet``
    draws per-class client proportions from Dirichlet(alpha) and cuts each
    shuffled class at those proportions; clients left empty then take one
    sample at a time from the currently largest client.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if n < n_clients:
        raise TooFewSamples(f"{n} samples cannot cover {n_clients} clients")
    rng = np.random.default_rng(seed)

    if strategy == "iid":
        chunks = np.array_split(rng.permutation(n), n_clients)
        return DatasetPartition({c: np.sort(ch) for c, ch in enumerate(chunks)})
    if strategy != "dirichlet":
        raise ValueError(f"unknown partition strategy {strategy!r}")
    if not alpha > 0:
        raise ValueError("alpha must be positive")

    buckets: list[list[int]] = [[] for _ in range(n_clients)]
    for cls in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        p = rng.dirichlet(np.full(n_clients, alpha))
        cuts = (np.cumsum(p) * len(idx)).astype(int)[:-1]
        for c, part in enumerate(np.split(idx, cuts)):
            buckets[c].extend(part.tolist())

    while True:
        empty = [c for c, b in enumerate(buckets) if not b]
        if not empty:
            break
        donor = max(range(n_clients), key=lambda c: (len(buckets[c]), -c))
        buckets[empty[0]].append(buckets[donor].pop())
    return DatasetPartition({c: np.sort(np.array(b, dtype=np.int64)) for c, b in enumerate(buckets)})
