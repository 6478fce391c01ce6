#!/usr/bin/env python3
"""Per-epoch sharded shuffling: one global permutation, k disjoint slices.

Each epoch draws a single permutation of the sample indices and hands worker
j the j-th contiguous slice. The multiset of samples consumed by any worker
count is therefore identical; an independent shuffle per worker breaks this
and silently changes what a training epoch means.
"""

import numpy as np

from mbsgd.data import epoch_shards, epoch_shards_per_worker

N, k = 16, 4

print("single-shuffle plan (epoch 0, seed 4):")
plan = epoch_shards(4, 0, N, k)
for j, shard in enumerate(plan.shards):
    print(f"  worker {j}: {shard.tolist()}")
union = sorted(np.concatenate(plan.shards).tolist())
print(f"  union: {union}  (every index exactly once)")

print()
print("independent per-worker shuffles (the pitfall):")
broken = epoch_shards_per_worker(4, 0, N, k)
for j, shard in enumerate(broken.shards):
    print(f"  worker {j}: {shard.tolist()}")
union = np.concatenate(broken.shards).tolist()
dups = sorted({i for i in union if union.count(i) > 1})
missed = sorted(set(range(N)) - set(union))
print(f"  duplicated samples: {dups}")
print(f"  never seen this epoch: {missed}")

print()
print("different epochs reshuffle:")
for epoch in range(3):
    first = epoch_shards(4, epoch, N, k).shards[0]
    print(f"  epoch {epoch}, worker 0: {first.tolist()}")
