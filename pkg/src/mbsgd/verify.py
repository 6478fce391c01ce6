"""Executable oracle suite: every module invariant as a pass/fail check.

Each check recomputes its expectation from an independent route (direct
summation, hand-stepped recurrences, finite differences, monolithic
gradients) and compares the system under test against it. A pitfall name
can be injected to demonstrate that exactly the corresponding check fails.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import engine as engine_mod
from . import solver as solver_mod
from .collectives import (
    ALGORITHMS,
    HALVING_DOUBLING,
    RING,
    Topology,
    allreduce,
    bandwidth_requirement,
    direct_sum,
    is_power_of_two,
    predict_bytes,
    predict_steps,
)
from .data import epoch_shards, epoch_shards_per_worker, make_synthetic, minibatches
from .engine import (
    PITFALL_NO_CORRECTION,
    PITFALL_NONE,
    PITFALL_PER_WORKER_SHUFFLE,
    EngineConfig,
    Engine,
    Seeds,
    run_pipelined_allreduces,
)
from .models import (
    SUM_OUTPUT,
    TRAIN,
    Batch,
    ModelSpec,
    init_model,
)
from .numerics import RngState, fisher_yates, prng_next
from .solver import MomentumState, SolverConfig, linear_scaled_lr, lr_at


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str = ""


def _finite_difference_gradient(model, batch, step=1e-5):
    w0 = model.get_params()
    grad = np.zeros_like(w0)
    for i in range(len(w0)):
        w = w0.copy()
        w[i] = w0[i] + step
        model.set_params(w)
        up = model.forward_loss(batch, TRAIN, update_running=False)
        w[i] = w0[i] - step
        model.set_params(w)
        down = model.forward_loss(batch, TRAIN, update_running=False)
        grad[i] = (up - down) / (2 * step)
    model.set_params(w0)
    return grad


def check_prng_reference() -> CheckResult:
    v0, _ = prng_next(RngState(0))
    v1, _ = prng_next(RngState(1))
    ok = v0 == 0xE220A8397B1DCDAF and v1 == 0x910A2DEC89025CC1
    return CheckResult("prng-reference-vectors", ok, f"seed0 -> {v0:#x}")


def check_permutation_property() -> CheckResult:
    for length in (0, 1, 2, 7, 64, 1000):
        perm = fisher_yates(12345 + length, length)
        if sorted(perm) != list(range(length)):
            return CheckResult("permutation-property", False, f"len {length} not a bijection")
    return CheckResult("permutation-property", True)


def check_gradients() -> CheckResult:
    specs = [
        ModelSpec(input_dim=3, classes=2, hidden=(4,)),
        ModelSpec(input_dim=4, classes=3, hidden=(5,), bn=True),
        ModelSpec(input_dim=3, classes=3, hidden=(4,), bn=True, residual_blocks=1),
    ]
    rng = np.random.default_rng(7)
    worst = 0.0
    for si, spec in enumerate(specs):
        model = init_model(spec, seed=100 + si, gamma_last_init=1.0)
        batch = Batch(
            rng.standard_normal((6, spec.input_dim)),
            rng.integers(0, spec.classes, size=6),
        )
        model.forward_loss(batch, TRAIN, update_running=False)
        analytic = model.backward(batch)
        numeric = _finite_difference_gradient(model, batch)
        rel = np.abs(analytic - numeric) / np.maximum(
            np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6
        )
        worst = max(worst, float(rel.max()))
    return CheckResult("gradient-finite-differences", worst <= 1e-4, f"max rel err {worst:.2e}")


def check_bn_per_worker() -> CheckResult:
    spec = ModelSpec(input_dim=4, classes=2, hidden=(6,), bn=True)
    rng = np.random.default_rng(3)
    batches = [
        Batch(rng.standard_normal((4, 4)), rng.integers(0, 2, size=4)) for _ in range(3)
    ]
    model = init_model(spec, seed=5)
    standalone = [model.forward_loss(b, TRAIN, update_running=False) for b in batches]
    interleaved = []
    for b in batches:  # same shards inside one multi-worker pass
        interleaved.append(model.forward_loss(b, TRAIN, update_running=False))
    ok = all(a == b for a, b in zip(standalone, interleaved))
    return CheckResult("bn-per-worker-independence", ok)


def check_residual_identity() -> CheckResult:
    spec = ModelSpec(input_dim=5, classes=2, residual_blocks=1)
    model = init_model(spec, seed=11, gamma_last_init=0.0)
    block = model.layers[0]
    x = np.random.default_rng(1).standard_normal((7, 5))
    out = block.forward(x, TRAIN, update_running=False)
    ok = np.array_equal(out, x)
    return CheckResult("residual-identity-at-init", ok)


def check_momentum_forms(pitfall: str = PITFALL_NONE) -> CheckResult:
    rng = np.random.default_rng(0)
    n = 100
    w_ref = rng.standard_normal(n)
    w_abs = w_ref.copy()
    state_ref = MomentumState.zeros(n)
    state_abs = MomentumState.zeros(n)
    correction = pitfall != PITFALL_NO_CORRECTION
    lr = 0.1
    worst = 0.0
    for step in range(300):
        grad = rng.standard_normal(n)
        if step % 17 == 0:
            lr = float(rng.uniform(0.02, 1.0))
        state_ref, w_ref = solver_mod.step_reference(state_ref, w_ref, grad, lr, 0.9)
        state_abs, w_abs = solver_mod.step_absorbed(
            state_abs, w_abs, grad, lr, 0.9, correction=correction
        )
        denom = max(float(np.abs(w_ref).max()), 1e-12)
        worst = max(worst, float(np.abs(w_ref - w_abs).max()) / denom)
    ok = worst <= 1e-10
    return CheckResult("momentum-form-equivalence", ok, f"max rel dev {worst:.2e}")


def check_constant_gradient_equivalence() -> CheckResult:
    # Integer data, dyadic-grid weights, and power-of-two lr/n/k keep every
    # float op exact, so the equality is bitwise.
    spec = ModelSpec(input_dim=2, classes=2, loss=SUM_OUTPUT)
    k, n, eta = 8, 4, 0.25
    rng = np.random.default_rng(2)
    batches = [
        Batch(rng.integers(-4, 5, size=(n, 2)).astype(float), np.zeros(n, dtype=int))
        for _ in range(k)
    ]
    small = init_model(spec, seed=21)
    dyadic = np.round(small.get_params() * 1024) / 1024
    small.set_params(dyadic)
    for b in batches:
        small.forward_loss(b, TRAIN)
        g = small.backward(b)
        small.set_params(small.get_params() - eta * g)
    big = init_model(spec, seed=21)
    big.set_params(dyadic)
    total = None
    for b in batches:
        big.forward_loss(b, TRAIN)
        g = big.backward(b) / k
        total = g if total is None else total + g
    big.set_params(big.get_params() - (k * eta) * total)
    ok = np.array_equal(small.get_params(), big.get_params())
    return CheckResult("constant-gradient-equivalence", ok)


def check_mode_equivalence() -> CheckResult:
    data = make_synthetic(31, 128, 4, 2, 2.0)
    eval_set = make_synthetic(32, 32, 4, 2, 2.0)
    spec = ModelSpec(input_dim=4, classes=2, hidden=(8,), bn=True)
    solver_cfg = SolverConfig(base_lr=0.05, ref_kn=8, momentum=0.9, weight_decay=1e-4,
                              milestones=(), scaling="linear")
    records = []
    for mode in (engine_mod.MODE_DISTRIBUTED, engine_mod.MODE_ACCUMULATED):
        topo = Topology(2, 2) if mode == engine_mod.MODE_DISTRIBUTED else Topology(1, 1)
        eng = Engine(
            data, eval_set, spec, solver_cfg,
            EngineConfig(k=4, n=4, topology=topo, mode=mode, epochs=2),
            Seeds(31, 7, 13),
        )
        records.append(eng.train())
    a, b = records
    dev = max(
        abs(x - y) / max(abs(x), 1e-12)
        for x, y in zip(
            a.train_losses() + a.eval_losses(), b.train_losses() + b.eval_losses()
        )
    )
    return CheckResult("mode-equivalence", dev <= 1e-9, f"max rel dev {dev:.2e}")


def check_aggregation(pitfall: str = PITFALL_NONE) -> CheckResult:
    """One distributed step against a hand-computed monolithic update."""
    data = make_synthetic(41, 64, 3, 2, 2.0)
    eval_set = make_synthetic(42, 16, 3, 2, 2.0)
    spec = ModelSpec(input_dim=3, classes=2, hidden=(5,))
    k, n = 4, 4
    solver_cfg = SolverConfig(
        base_lr=0.1, ref_kn=n, momentum=0.0, weight_decay=0.01, milestones=(),
        scaling="linear",
    )
    eng = Engine(
        data, eval_set, spec, solver_cfg,
        EngineConfig(k=k, n=n, topology=Topology(2, 2), epochs=1, pitfall=pitfall),
        Seeds(41, 9, 17),
    )
    plan = epoch_shards(17, 0, data.size, k)
    batches = [minibatches(data, plan.shards[j], n)[0] for j in range(k)]

    oracle = init_model(spec, seed=9)
    w0 = oracle.get_params()
    union = Batch(
        np.concatenate([b.inputs for b in batches]),
        np.concatenate([b.labels for b in batches]),
    )
    oracle.forward_loss(union, TRAIN)
    grad = oracle.backward(union)  # (1/kn) * sum of all sample grads
    lr_hat = linear_scaled_lr(0.1, k * n, n)
    w_expect = w0 - lr_hat * (grad + 0.01 * w0)

    eng.distributed_step(batches, iters_per_epoch=4)
    dev = float(np.abs(eng.lead.get_params() - w_expect).max())
    return CheckResult("aggregation-normalization", dev <= 1e-12, f"max abs dev {dev:.2e}")


def check_loss_vs_lr_scaling() -> CheckResult:
    """Scaling the loss by k only matches scaling the lr when decay is off."""

    def run(scale_loss: bool, weight_decay: float) -> float:
        w = 1.0
        g_eps = 0.4  # constant epsilon-gradient of a 1-D linear loss
        eta, k = 0.1, 8
        for _ in range(2):
            if scale_loss:
                w = w - eta * (k * g_eps + weight_decay * w)
            else:
                w = w - (k * eta) * (g_eps + weight_decay * w)
        return w

    with_decay_differs = abs(run(True, 0.5) - run(False, 0.5)) > 1e-6
    without_decay_same = abs(run(True, 0.0) - run(False, 0.0)) <= 1e-12
    ok = with_decay_differs and without_decay_same
    return CheckResult("loss-vs-lr-scaling", ok)


def check_allreduce_agreement() -> CheckResult:
    rng = np.random.default_rng(5)
    for p in range(1, 7):
        bufs = [rng.integers(-100, 100, size=37).astype(float) for _ in range(p)]
        want = direct_sum(bufs)
        for algo in ALGORITHMS:
            if algo == HALVING_DOUBLING and not is_power_of_two(p):
                continue
            results, report = allreduce(algo, Topology(p, 1), bufs)
            if not all(np.array_equal(r, want) for r in results):
                return CheckResult("allreduce-agreement", False, f"{algo} p={p} wrong sum")
        if p > 1:
            length = 16 * p  # divisible: zero padding, formulas exact
            bufs = [rng.integers(-9, 9, size=length).astype(float) for _ in range(p)]
            for algo in (RING, HALVING_DOUBLING):
                if algo == HALVING_DOUBLING and not is_power_of_two(p):
                    continue
                _, report = allreduce(algo, Topology(p, 1), bufs)
                want_bytes = predict_bytes(p, length * 8)
                want_steps = predict_steps(algo, p)
                if any(s != want_steps for s in report.steps):
                    return CheckResult("allreduce-agreement", False, f"{algo} p={p} steps")
                if any(b != want_bytes for b in report.bytes_sent):
                    return CheckResult("allreduce-agreement", False, f"{algo} p={p} bytes")
    return CheckResult("allreduce-agreement", True)


def check_epoch_consistency(pitfall: str = PITFALL_NONE) -> CheckResult:
    maker = (
        epoch_shards_per_worker if pitfall == PITFALL_PER_WORKER_SHUFFLE else epoch_shards
    )
    n_samples, k = 64, 8
    for epoch in range(3):
        single = epoch_shards(99, epoch, n_samples, 1)
        multi = maker(99, epoch, n_samples, k)
        consumed_single = sorted(np.concatenate(single.shards).tolist())
        consumed_multi = sorted(np.concatenate(multi.shards).tolist())
        if consumed_single != consumed_multi:
            return CheckResult(
                "epoch-consistency", False, f"epoch {epoch}: multisets differ"
            )
    return CheckResult("epoch-consistency", True)


def check_pipeline_soundness() -> CheckResult:
    rng = np.random.default_rng(8)
    topo = Topology(4, 1)
    tasks = [
        [rng.integers(-50, 50, size=21).astype(float) for _ in range(4)] for _ in range(6)
    ]
    sequential, _ = run_pipelined_allreduces(RING, topo, tasks, window=1)
    for seed in range(50):
        fuzzed, _ = run_pipelined_allreduces(
            RING, topo, tasks, window=2, policy="random", seed=seed
        )
        for a, b in zip(sequential, fuzzed):
            for x, y in zip(a, b):
                if not np.array_equal(x, y):
                    return CheckResult("pipeline-soundness", False, f"seed {seed} differs")
    return CheckResult("pipeline-soundness", True)


def check_scaling_arithmetic() -> CheckResult:
    ok = (
        linear_scaled_lr(0.1, 8192, 256) == 3.2
        and linear_scaled_lr(0.1, 512, 256) == 0.2
        and abs(solver_mod.sqrt_scaled_lr(0.1, 8192, 256) - 0.1 * math.sqrt(32)) < 1e-15
    )
    return CheckResult("scaling-rule-arithmetic", ok)


def check_bandwidth_arithmetic() -> CheckResult:
    bits = bandwidth_requirement(25_000_000, 4, 0.125)
    param_mb = 25_000_000 * 4 / 1e6
    ok = bits == 12.8e9 and param_mb == 100.0
    return CheckResult("bandwidth-arithmetic", ok, f"{bits/1e9:.1f} Gbit/s")


def check_warmup_shape() -> CheckResult:
    cfg = SolverConfig(
        base_lr=0.1, ref_kn=256, warmup="gradual", warmup_epochs=5,
        milestones=(30, 60, 80), scaling="linear",
    )
    kn, ipe = 8192, 20
    lrs = [lr_at(cfg, kn, it, ipe) for it in range(90 * ipe)]
    warm = lrs[: 5 * ipe]
    ramps = all(b >= a for a, b in zip(warm, warm[1:]))
    hits_target = lrs[5 * ipe] == 3.2
    after = (
        lrs[30 * ipe] == 3.2 * 0.1
        and lrs[60 * ipe] == 3.2 * 0.1 * 0.1
        and lrs[80 * ipe] == 3.2 * 0.1 * 0.1 * 0.1
    )
    return CheckResult("warmup-schedule-shape", ramps and hits_target and after)


def run_checks(pitfall: str = PITFALL_NONE) -> list:
    return [
        check_prng_reference(),
        check_permutation_property(),
        check_gradients(),
        check_bn_per_worker(),
        check_residual_identity(),
        check_momentum_forms(pitfall),
        check_constant_gradient_equivalence(),
        check_mode_equivalence(),
        check_aggregation(pitfall),
        check_loss_vs_lr_scaling(),
        check_allreduce_agreement(),
        check_epoch_consistency(pitfall),
        check_pipeline_soundness(),
        check_scaling_arithmetic(),
        check_bandwidth_arithmetic(),
        check_warmup_shape(),
    ]


def format_table(results: list) -> str:
    width = max(len(r.name) for r in results)
    lines = []
    for r in results:
        mark = "PASS" if r.ok else "FAIL"
        suffix = f"  ({r.detail})" if r.detail else ""
        lines.append(f"{mark}  {r.name:<{width}}{suffix}")
    failed = [r.name for r in results if not r.ok]
    lines.append(
        f"{len(results) - len(failed)}/{len(results)} checks passed"
        + (f"; failing: {', '.join(failed)}" if failed else "")
    )
    return "\n".join(lines)
