"""Distributed synchronous SGD orchestration.

k workers hold bitwise-identical model replicas; each computes the gradient
of its own shard batch normalized by the TOTAL minibatch size kn, a summing
allreduce aggregates them (local reduce within a server, interserver
algorithm of choice, local broadcast), weight decay is added after
aggregation, and every replica applies the identical solver step.

An accumulation mode walks the same k batches sequentially on one replica
and must produce the same trajectory; deliberately wrong variants of the
aggregation arithmetic sit behind a `pitfall` switch for differential
tests.
"""

from __future__ import annotations

import copy
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import solver as solver_mod
from .collectives import (
    RANK_FACTORIES,
    Topology,
    allreduce,
    local_broadcast,
    local_reduce,
)
from .data import (
    Dataset,
    epoch_shards,
    epoch_shards_per_worker,
    minibatches,
)
from .models import EVAL, TRAIN, Batch, Model, ModelSpec, init_model
from .solver import MomentumState, SolverConfig, apply_weight_decay, lr_at
from .transport import CollectiveTask, LinkCostModel, SimScheduler

MODE_DISTRIBUTED = "distributed"
MODE_ACCUMULATED = "accumulated"

PITFALL_NONE = "none"
PITFALL_NORMALIZE_BY_N = "normalize-by-n"
PITFALL_SCALE_LOSS = "scale-loss"
PITFALL_NO_CORRECTION = "no-momentum-correction"
PITFALL_PER_WORKER_SHUFFLE = "per-worker-shuffle"
PITFALLS = (
    PITFALL_NONE,
    PITFALL_NORMALIZE_BY_N,
    PITFALL_SCALE_LOSS,
    PITFALL_NO_CORRECTION,
    PITFALL_PER_WORKER_SHUFFLE,
)


class EngineError(RuntimeError):
    pass


@dataclass
class EngineConfig:
    k: int = 8
    n: int = 4
    topology: Topology = field(default_factory=lambda: Topology(2, 4))
    algo: str = "ring"
    mode: str = MODE_DISTRIBUTED
    pipeline_window: int = 1
    epochs: int = 5
    debug_checksums: bool = True
    pitfall: str = PITFALL_NONE

    def __post_init__(self):
        if self.k < 1 or self.n < 1:
            raise ValueError("k and n must be >= 1")
        if self.mode not in (MODE_DISTRIBUTED, MODE_ACCUMULATED):
            raise ValueError(f"unknown engine mode: {self.mode!r}")
        if self.mode == MODE_DISTRIBUTED and self.k != self.topology.workers:
            raise ValueError(
                f"k={self.k} must equal topology workers "
                f"{self.topology.servers}x{self.topology.gpus_per_server}"
                f"={self.topology.workers} in distributed mode"
            )
        if self.pipeline_window < 1:
            raise ValueError("pipeline_window must be >= 1")
        if self.pitfall not in PITFALLS:
            raise ValueError(f"unknown pitfall: {self.pitfall!r} (choose from {PITFALLS})")


@dataclass
class Seeds:
    data: int = 1
    init: int = 2
    shuffle: int = 3


@dataclass
class TrainRecord:
    """Per-iteration log rows; CSV columns are fixed and floats carry
    17 significant digits so they round-trip to the same double."""

    rows: list = field(default_factory=list)  # (epoch, iter, lr, train, eval, wall)

    HEADER = "epoch,iter,lr,train_loss,eval_loss,wall_seconds"

    def append(self, epoch, iteration, lr, train_loss, eval_loss, wall_seconds):
        if not (np.isfinite(train_loss) and np.isfinite(eval_loss)):
            raise EngineError(
                f"non-finite loss at epoch {epoch} iteration {iteration}: "
                f"train={train_loss} eval={eval_loss}"
            )
        self.rows.append((epoch, iteration, lr, train_loss, eval_loss, wall_seconds))

    def train_losses(self) -> list:
        return [r[3] for r in self.rows]

    def eval_losses(self) -> list:
        return [r[4] for r in self.rows]

    def lrs(self) -> list:
        return [r[2] for r in self.rows]

    def to_csv(self, path, comments=()) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for line in comments:
                fh.write(f"# {line}\n")
            fh.write(self.HEADER + "\n")
            for epoch, iteration, lr, train_loss, eval_loss, wall in self.rows:
                fh.write(
                    f"{epoch},{iteration},{lr:.17g},{train_loss:.17g},"
                    f"{eval_loss:.17g},{wall:.17g}\n"
                )


def worker_gradient(model: Model, batch: Batch, k: int) -> tuple[float, np.ndarray]:
    """Loss and the per-worker gradient normalized by the total size kn.

    models.backward returns the 1/n-mean gradient; dividing by k makes a
    summing allreduce across k workers yield the full-minibatch mean with
    no further scaling.
    """
    loss = model.forward_loss(batch, TRAIN)
    return loss, model.backward(batch) / k


def params_checksum(params: np.ndarray) -> int:
    return zlib.adler32(params.tobytes())


class Engine:
    """Owns the replicas, solver state, and batch plumbing for one run."""

    def __init__(
        self,
        dataset: Dataset,
        eval_dataset: Dataset,
        model_spec: ModelSpec,
        solver_config: SolverConfig,
        engine_config: EngineConfig,
        seeds: Seeds,
        gamma_last_init: float = 0.0,
        cost_model: LinkCostModel | None = None,
    ):
        self.dataset = dataset
        self.eval_dataset = eval_dataset
        self.solver_config = solver_config
        self.config = engine_config
        self.seeds = seeds
        self.cost_model = cost_model or LinkCostModel()

        proto = init_model(model_spec, seeds.init, gamma_last_init)
        k = engine_config.k
        if engine_config.mode == MODE_DISTRIBUTED:
            self.replicas = [proto] + [copy.deepcopy(proto) for _ in range(k - 1)]
        else:
            self.replicas = [proto]
        n_params = proto.param_count
        self.states = [MomentumState.zeros(n_params) for _ in self.replicas]
        self.iteration = 0
        self._eval_batch = Batch(eval_dataset.inputs, eval_dataset.labels)

    @property
    def lead(self) -> Model:
        return self.replicas[0]

    @property
    def kn(self) -> int:
        return self.config.k * self.config.n

    def _lr(self, iters_per_epoch: int) -> float:
        return lr_at(self.solver_config, self.kn, self.iteration, iters_per_epoch)

    def _apply_update(self, idx: int, grad_sum: np.ndarray, lr: float) -> None:
        """One solver step on replica idx from the aggregated epsilon-gradient."""
        cfg = self.solver_config
        model = self.replicas[idx]
        w = model.get_params()
        if self.config.pitfall in (PITFALL_NORMALIZE_BY_N, PITFALL_SCALE_LOSS):
            # Both wrong variants feed a gradient k times too large and
            # "compensate" with the unscaled lr, corrupting weight decay.
            grad_sum = grad_sum * self.config.k
            lr = cfg.base_lr
        grad = apply_weight_decay(grad_sum, w, cfg.weight_decay)
        state = self.states[idx]
        if cfg.momentum_form == solver_mod.FORM_ABSORBED:
            correction = cfg.momentum_correction
            if self.config.pitfall == PITFALL_NO_CORRECTION:
                correction = False
            state, w = solver_mod.step_absorbed(state, w, grad, lr, cfg.momentum, correction)
        else:
            state, w = solver_mod.step_reference(state, w, grad, lr, cfg.momentum)
        self.states[idx] = state
        model.set_params(w)

    def _epoch_plan(self, epoch: int):
        maker = (
            epoch_shards_per_worker
            if self.config.pitfall == PITFALL_PER_WORKER_SHUFFLE
            else epoch_shards
        )
        return maker(self.seeds.shuffle, epoch, self.dataset.size, self.config.k)

    def distributed_step(self, batches: list, iters_per_epoch: int) -> tuple[float, float]:
        """One synchronous update from k per-worker batches.

        Returns (train_loss, simulated communication seconds). All replicas
        are verified bitwise identical afterwards when debug checksums are
        on.
        """
        cfg = self.config
        losses = []
        grads = []
        for j in range(cfg.k):
            loss, grad = worker_gradient(self.replicas[j], batches[j], cfg.k)
            losses.append(loss)
            grads.append(grad)
        topo = cfg.topology
        g = topo.gpus_per_server
        server_bufs = [
            local_reduce(grads[s * g : (s + 1) * g]) for s in range(topo.servers)
        ]
        reduced, report = allreduce(cfg.algo, topo, server_bufs)
        comm_seconds = self.cost_model.collective_seconds(report)
        lr = self._lr(iters_per_epoch)
        for s in range(topo.servers):
            copies = local_broadcast(reduced[s], g)
            for i, grad_sum in enumerate(copies):
                self._apply_update(s * g + i, grad_sum, lr)
        self.iteration += 1
        if cfg.debug_checksums:
            sums = {params_checksum(r.get_params()) for r in self.replicas}
            if len(sums) != 1:
                raise EngineError(
                    f"replica divergence at iteration {self.iteration}: checksums {sums}"
                )
        return sum(losses) / cfg.k, comm_seconds

    def accumulated_step(self, batches: list, iters_per_epoch: int) -> tuple[float, float]:
        """Gradient-accumulation equivalent of distributed_step on one replica.

        BN batch statistics are computed per micro-batch of size n; the
        running averages follow only the lead shard's batches, mirroring
        what the lead replica would hold in a distributed run.
        """
        cfg = self.config
        model = self.lead
        losses = []
        total = None
        for j in range(cfg.k):
            loss = model.forward_loss(batches[j], TRAIN, update_running=(j == 0))
            grad = model.backward(batches[j]) / cfg.k
            losses.append(loss)
            total = grad if total is None else total + grad
        self._apply_update(0, total, self._lr(iters_per_epoch))
        self.iteration += 1
        return sum(losses) / cfg.k, 0.0

    def eval_loss(self) -> float:
        return self.lead.forward_loss(self._eval_batch, EVAL)

    def train(self) -> TrainRecord:
        """Run the full loop; deterministic given the seeds."""
        cfg = self.config
        record = TrainRecord()
        shard_len = self.dataset.size // cfg.k
        iters_per_epoch = shard_len // cfg.n
        if iters_per_epoch < 1:
            raise EngineError(
                f"dataset too small: shard length {shard_len} < batch size {cfg.n}"
            )
        for epoch in range(cfg.epochs):
            plan = self._epoch_plan(epoch)
            per_worker = [
                minibatches(self.dataset, plan.shards[j], cfg.n) for j in range(cfg.k)
            ]
            for it in range(iters_per_epoch):
                batches = [per_worker[j][it] for j in range(cfg.k)]
                lr = self._lr(iters_per_epoch)
                if cfg.mode == MODE_DISTRIBUTED:
                    train_loss, wall = self.distributed_step(batches, iters_per_epoch)
                else:
                    # no transport in accumulation mode, so no simulated
                    # communication time; keeps the CSV deterministic
                    train_loss, wall = self.accumulated_step(batches, iters_per_epoch)
                record.append(epoch, self.iteration - 1, lr, train_loss, self.eval_loss(), wall)
        return record


def pipeline_dependencies(num_tasks: int, window: int) -> list:
    """Start constraints for pipelined allreduces: task i waits on i-window.

    A window at least the task count degenerates to no constraint.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    return [i - window if i - window >= 0 else None for i in range(num_tasks)]


def run_pipelined_allreduces(
    algo: str,
    topology: Topology,
    task_buffers: list,
    window: int,
    policy: str = "round_robin",
    seed: int = 0,
) -> tuple[list, list]:
    """Execute a sequence of allreduce tasks under the window partial order.

    Each task gets a private communication context; completion of task i
    admits task i+window. Every admitted interleaving must agree with a
    sequential run, which the fuzz tests assert. Returns (per-task results,
    completion order).
    """
    deps = pipeline_dependencies(len(task_buffers), window)
    factory = RANK_FACTORIES[algo]
    p = topology.servers

    def make_task(i):
        gens = [factory(r, p, task_buffers[i][r]) for r in range(p)]
        return CollectiveTask(f"allreduce-{i}", gens)

    sched = SimScheduler(policy=policy, seed=seed)
    tasks = {}
    completion_order = []

    def admit(i):
        tasks[i] = make_task(i)
        sched.add(tasks[i])

    def on_complete(task):
        done_idx = next(i for i, t in tasks.items() if t is task)
        completion_order.append(done_idx)
        nxt = done_idx + window
        if nxt < len(task_buffers) and nxt not in tasks:
            admit(nxt)

    sched.on_task_complete = on_complete
    for i, dep in enumerate(deps):
        if dep is None:
            admit(i)
    sched.run()
    results = [tasks[i].results for i in range(len(task_buffers))]
    return results, completion_order
