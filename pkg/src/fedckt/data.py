"""Synthetic datasets, non-IID Dirichlet partitioning, per-client splits,
and the shared unlabeled public pool.

Everything here is a pure function of (inputs, seed); no global RNG state.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError
from .rng import substream

TRAIN_FRACTIONS = (0.1, 0.3, 0.4)  # per-client train share, drawn uniformly
VAL_TENTHS = 1  # validation share, in tenths
TEST_TENTHS = 5  # test share, in tenths


@dataclass(frozen=True)
class RawDataset:
    """Feature rows with integer labels in [0, num_classes)."""

    inputs: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int64
    num_classes: int

    def __post_init__(self):
        inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2:
            raise ConfigurationError("inputs must be a 2-D matrix")
        if labels.shape != (inputs.shape[0],):
            raise ConfigurationError("labels length must match input rows")
        if not np.all(np.isfinite(inputs)):
            raise ConfigurationError("inputs must be finite")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ConfigurationError("labels must lie in [0, num_classes)")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def take(self, idx: np.ndarray) -> "RawDataset":
        return RawDataset(self.inputs[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    alpha: float
    seed: int

    def __post_init__(self):
        if self.num_clients < 1:
            raise ConfigurationError("num_clients must be >= 1")
        if not self.alpha > 0:
            raise ConfigurationError("alpha must be > 0")


@dataclass(frozen=True)
class ClientDataBundle:
    """One client's train/val/test splits.

    p_k is the client's share of the total active training data; it is
    assigned across clients by assign_data_fractions, not per split.
    Clients whose shard is too small for non-empty splits are inactive and
    excluded from the p_k normalization.
    """

    train: RawDataset
    val: RawDataset
    test: RawDataset
    p_k: float = 0.0
    active: bool = True
    train_fraction: float = 0.0


@dataclass(frozen=True)
class PublicPool:
    """Unlabeled inputs shared by every client for co-distillation."""

    inputs: np.ndarray  # (|P|, d) float64

    def __post_init__(self):
        inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        if inputs.ndim != 2 or inputs.shape[0] < 1:
            raise ConfigurationError("public pool must have at least one row")
        object.__setattr__(self, "inputs", inputs)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]


def class_means(num_classes: int, dim: int, separation: float, seed: int) -> np.ndarray:
    """One Gaussian-blob mean per class, sampled on a sphere of radius `separation`."""
    rng = substream(seed, "class-means")
    directions = rng.normal(size=(num_classes, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return separation * directions


def sample_blobs(
    means: np.ndarray,
    samples_per_class: int,
    num_classes: int,
    seed: int,
    tag: str = "blob-samples",
) -> RawDataset:
    """Balanced unit-covariance blobs around the given per-class means."""
    rng = substream(seed, tag)
    dim = means.shape[1]
    labels = np.repeat(np.arange(means.shape[0], dtype=np.int64), samples_per_class)
    inputs = means[labels] + rng.normal(size=(labels.size, dim))
    return RawDataset(inputs, labels, num_classes)


def generate_synthetic_classification(
    num_classes: int,
    dim: int,
    samples_per_class: int,
    class_separation: float,
    seed: int,
) -> RawDataset:
    """Gaussian-blob classification data with balanced labels."""
    if num_classes < 2:
        raise ConfigurationError("num_classes must be >= 2")
    if dim < 2:
        raise ConfigurationError("dim must be >= 2")
    if samples_per_class < 1:
        raise ConfigurationError("samples_per_class must be >= 1")
    if not class_separation > 0:
        raise ConfigurationError("class_separation must be > 0")
    means = class_means(num_classes, dim, class_separation, seed)
    return sample_blobs(means, samples_per_class, num_classes, seed)


def partition_dirichlet(data: RawDataset, spec: PartitionSpec) -> list[RawDataset]:
    """Split each class across clients by a Dir_K(alpha) draw.

    The multiset union of the returned shards equals the input exactly;
    empty shards are legal and must be handled downstream.
    """
    if len(data) == 0:
        raise ConfigurationError("cannot partition an empty dataset")
    rng = substream(spec.seed, "dirichlet-partition")
    k = spec.num_clients
    per_client: list[list[np.ndarray]] = [[] for _ in range(k)]
    for cls in range(data.num_classes):
        idx = np.flatnonzero(data.labels == cls)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        proportions = rng.dirichlet(np.full(k, spec.alpha))
        # integer cut points conserve the class count exactly
        cuts = np.floor(np.cumsum(proportions) * idx.size).astype(np.int64)[:-1]
        for client, chunk in enumerate(np.split(idx, cuts)):
            per_client[client].append(chunk)
    shards = []
    for chunks in per_client:
        if chunks:
            merged = np.concatenate(chunks)
        else:
            merged = np.empty(0, dtype=np.int64)
        shards.append(data.take(merged))
    return shards


def split_train_val_test(
    shard: RawDataset,
    seed: int,
    train_fraction: float | None = None,
) -> ClientDataBundle:
    """Split a shard into train/val/test with a {0.1,0.3,0.4}/0.1/0.5 ratio.

    The train fraction is drawn uniformly from {0.1, 0.3, 0.4} unless given.
    Sizes use floor rounding in exact integer tenths; the leftover (the
    discarded share when train < 0.4) is folded into the test split. A shard
    too small for three non-empty splits yields an inactive bundle.
    """
    if len(shard) == 0:
        raise ConfigurationError("cannot split an empty shard")
    rng = substream(seed, "split")
    if train_fraction is None:
        train_fraction = TRAIN_FRACTIONS[rng.integers(len(TRAIN_FRACTIONS))]
    if train_fraction not in TRAIN_FRACTIONS:
        raise ConfigurationError(f"train fraction must be one of {TRAIN_FRACTIONS}")
    n = len(shard)
    train_tenths = round(train_fraction * 10)
    n_train = (train_tenths * n) // 10
    n_val = (VAL_TENTHS * n) // 10
    n_test = (TEST_TENTHS * n) // 10
    leftover = n - n_train - n_val - n_test
    n_test += leftover
    active = n_train >= 1 and n_val >= 1 and n_test >= 1
    order = rng.permutation(n)
    train = shard.take(order[:n_train])
    val = shard.take(order[n_train : n_train + n_val])
    test = shard.take(order[n_train + n_val : n_train + n_val + n_test])
    return ClientDataBundle(
        train=train, val=val, test=test, active=active, train_fraction=train_fraction
    )


def assign_data_fractions(bundles: list[ClientDataBundle]) -> list[ClientDataBundle]:
    """Set p_k = train size / total train size over active clients."""
    total = sum(len(b.train) for b in bundles if b.active)
    if total == 0:
        raise ConfigurationError("no active client holds training data")
    return [
        replace(b, p_k=(len(b.train) / total if b.active else 0.0)) for b in bundles
    ]


def draw_public_pool(source: RawDataset, size: int, seed: int) -> PublicPool:
    """Uniform sample without replacement from the source; labels dropped."""
    if size < 1:
        raise ConfigurationError("public pool size must be >= 1")
    if size > len(source):
        raise ConfigurationError(
            f"public pool size {size} exceeds source size {len(source)}"
        )
    rng = substream(seed, "public-pool")
    idx = rng.choice(len(source), size=size, replace=False)
    return PublicPool(source.inputs[idx])


def minibatch(data, batch: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform mini-batch indices: without replacement when batch <= n,
    with replacement otherwise."""
    if batch < 1:
        raise ConfigurationError("batch size must be >= 1")
    n = len(data)
    if batch <= n:
        return rng.choice(n, size=batch, replace=False)
    return rng.choice(n, size=batch, replace=True)


def label_histogram(data: RawDataset) -> np.ndarray:
    return np.bincount(data.labels, minlength=data.num_classes)


def label_entropy(data: RawDataset) -> float:
    """Empirical label entropy of a shard, in nats (0.0 for empty shards)."""
    counts = label_histogram(data)
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


def mean_label_entropy(shards: list[RawDataset]) -> float:
    populated = [s for s in shards if len(s) > 0]
    return float(np.mean([label_entropy(s) for s in populated])) if populated else 0.0


def dataset_to_csv(data: RawDataset, path) -> None:
    """Columnar CSV with header f0..f{d-1},label."""
    header = ",".join([f"f{i}" for i in range(data.dim)] + ["label"])
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row, label in zip(data.inputs, data.labels):
            fh.write(",".join(repr(float(v)) for v in row) + f",{int(label)}\n")


def partition_summary(shards: list[RawDataset]) -> dict:
    """Per-client label histograms plus imbalance metrics, JSON-ready."""
    sizes = np.array([len(s) for s in shards], dtype=np.int64)
    populated = sizes[sizes > 0]
    entropies = [label_entropy(s) for s in shards if len(s) > 0]
    return {
        "num_clients": len(shards),
        "clients": [
            {
                "client": i,
                "size": int(len(s)),
                "histogram": [int(c) for c in label_histogram(s)],
                "entropy_nats": label_entropy(s),
            }
            for i, s in enumerate(shards)
        ],
        "max_min_shard_ratio": (
            float(populated.max() / populated.min()) if populated.size else math.nan
        ),
        "mean_label_entropy": mean_label_entropy(shards),
        "median_label_entropy": float(np.median(entropies)) if entropies else 0.0,
        "empty_shards": int((sizes == 0).sum()),
    }


def write_partition_summary(shards: list[RawDataset], path) -> None:
    with open(path, "w") as fh:
        json.dump(partition_summary(shards), fh, indent=2, sort_keys=True)
        fh.write("\n")
