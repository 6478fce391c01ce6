"""Synthetic datasets and sharded per-epoch shuffling.

Each epoch draws one global permutation of the sample indices and splits it
into k contiguous shards, one per worker, so the multiset of samples a
k-worker run consumes matches a single-worker run exactly (up to the
documented remainder truncation). A deliberately wrong variant where every
worker shuffles independently is provided for differential tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import Batch
from .numerics import RngState, fisher_yates, gauss_vector, mix_seed


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, dim) float64
    labels: np.ndarray  # (N,) int64
    seed: int

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]


@dataclass
class EpochPlan:
    """One epoch's worker shards: disjoint contiguous slices of a permutation."""

    epoch: int
    shards: list  # k arrays of sample indices, each of length floor(N/k)

    @property
    def k(self) -> int:
        return len(self.shards)


def make_synthetic(
    seed: int, n_samples: int, dim: int, classes: int, separation: float
) -> Dataset:
    """Gaussian class clusters with unit variance and the given mean offset.

    Class c's mean sits at separation * e_{c mod dim}; labels cycle through
    the classes so counts are balanced up to rounding. Deterministic in the
    seed.
    """
    if n_samples < 1 or dim < 1 or classes < 1:
        raise ValueError("n_samples, dim, classes must all be >= 1")
    labels = np.arange(n_samples, dtype=np.int64) % classes
    noise, _ = gauss_vector(RngState(mix_seed(seed, 1)), n_samples * dim)
    inputs = noise.reshape(n_samples, dim)
    means = np.zeros((classes, dim))
    for c in range(classes):
        means[c, c % dim] = separation
    inputs += means[labels]
    return Dataset(inputs=inputs, labels=labels, seed=seed)


def epoch_shards(seed: int, epoch: int, n_samples: int, k: int) -> EpochPlan:
    """Single per-epoch shuffle partitioned into k contiguous worker shards.

    The permutation seed is one splitmix64 step of (seed XOR epoch*golden),
    and the trailing n_samples mod k indices are dropped so every worker
    sees the same shard length.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n_samples:
        raise ValueError(f"k={k} exceeds dataset size {n_samples}")
    perm = fisher_yates(mix_seed(seed, epoch), n_samples)
    shard_len = n_samples // k
    shards = [perm[j * shard_len : (j + 1) * shard_len] for j in range(k)]
    return EpochPlan(epoch=epoch, shards=shards)


def epoch_shards_per_worker(seed: int, epoch: int, n_samples: int, k: int) -> EpochPlan:
    """Pitfall variant: every worker shuffles the whole set independently.

    Worker j draws its own permutation and takes slice j, so the union over
    workers generally contains duplicates and gaps; this breaks the
    single-shuffle equivalence and exists only for differential tests.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n_samples:
        raise ValueError(f"k={k} exceeds dataset size {n_samples}")
    shard_len = n_samples // k
    shards = []
    for j in range(k):
        perm = fisher_yates(mix_seed(mix_seed(seed, epoch), j + 1), n_samples)
        shards.append(perm[j * shard_len : (j + 1) * shard_len])
    return EpochPlan(epoch=epoch, shards=shards)


def batch_windows(shard: np.ndarray, n: int) -> list:
    """Consecutive non-overlapping index windows of size n; partial tail dropped."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return [shard[i : i + n] for i in range(0, len(shard) - n + 1, n)]


def minibatches(dataset: Dataset, shard: np.ndarray, n: int) -> list:
    """Materialize the shard's windows as Batches against the dataset."""
    return [
        Batch(dataset.inputs[idx], dataset.labels[idx]) for idx in batch_windows(shard, n)
    ]


def export_csv(dataset: Dataset, path) -> None:
    """Dump the dataset for inspection: label column then feature columns."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# seed = %d\n" % dataset.seed)
        fh.write("label," + ",".join(f"x{i}" for i in range(dataset.dim)) + "\n")
        for label, row in zip(dataset.labels, dataset.inputs):
            fh.write(str(int(label)) + "," + ",".join(f"{v:.17g}" for v in row) + "\n")
