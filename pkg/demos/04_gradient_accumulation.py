#!/usr/bin/env python3
"""Gradient accumulation simulates distributed training exactly.

An 8-worker distributed run and a single-worker run that accumulates the
same 8 micro-batch gradients between updates must follow the same
trajectory, provided the per-worker loss is normalized by the total
minibatch size kn and BN statistics stay per-micro-batch.
"""

import numpy as np

from mbsgd.collectives import Topology
from mbsgd.data import make_synthetic
from mbsgd.engine import MODE_ACCUMULATED, MODE_DISTRIBUTED, Engine, EngineConfig, Seeds
from mbsgd.models import ModelSpec
from mbsgd.solver import SolverConfig

data = make_synthetic(11, 512, 8, 2, 2.0)
eval_set = make_synthetic(12, 64, 8, 2, 2.0)
spec = ModelSpec(input_dim=8, classes=2, hidden=(16, 16), bn=True)
solver_cfg = SolverConfig(
    base_lr=0.05, ref_kn=32, momentum=0.9, weight_decay=1e-4,
    milestones=(), scaling="linear",
)

runs = {}
for mode, topo in ((MODE_DISTRIBUTED, Topology(2, 4)), (MODE_ACCUMULATED, Topology(1, 1))):
    engine = Engine(
        data, eval_set, spec, solver_cfg,
        EngineConfig(k=8, n=4, topology=topo, mode=mode, epochs=3),
        Seeds(11, 5, 3),
    )
    record = engine.train()
    runs[mode] = (record, engine.lead.get_params())
    print(f"{mode:12s}: final train loss {record.train_losses()[-1]:.12f}, "
          f"final eval loss {record.eval_losses()[-1]:.12f}")

rec_d, w_d = runs[MODE_DISTRIBUTED]
rec_a, w_a = runs[MODE_ACCUMULATED]
loss_dev = max(
    abs(x - y) for x, y in zip(rec_d.train_losses(), rec_a.train_losses())
)
print()
print(f"max |train loss difference| over {len(rec_d.rows)} iterations: {loss_dev:.3e}")
print(f"max |parameter difference| at the end: {np.abs(w_d - w_a).max():.3e}")
print()
print("the two modes see identical batches in identical order; the only")
print("float-level difference is the summation tree of the allreduce vs the")
print("sequential accumulation, which stays below 1e-12 relative here.")
