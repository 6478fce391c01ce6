import math

import numpy as np
import pytest

from mbsgd.solver import (
    MomentumState,
    SolverConfig,
    apply_weight_decay,
    linear_scaled_lr,
    lr_at,
    sqrt_scaled_lr,
    step_absorbed,
    step_reference,
)


def test_linear_scaling_values():
    assert linear_scaled_lr(0.1, 256, 256) == 0.1
    assert linear_scaled_lr(0.1, 8192, 256) == 3.2
    assert linear_scaled_lr(0.1, 512, 256) == 0.2


def test_sqrt_scaling_values():
    assert sqrt_scaled_lr(0.1, 8192, 256) == pytest.approx(0.1 * math.sqrt(32), rel=1e-15)
    assert sqrt_scaled_lr(0.1, 256, 256) == pytest.approx(0.1)
    assert sqrt_scaled_lr(0.4, 1024, 256) == pytest.approx(0.8)


def gradual_config(**kw):
    base = dict(
        base_lr=0.1, ref_kn=256, warmup="gradual", warmup_epochs=5,
        milestones=(30, 60, 80), decay_factor=0.1, scaling="linear",
    )
    base.update(kw)
    return SolverConfig(**base)


def test_lr_warmup_midpoint():
    # warmup_iters = 5 epochs * 20 iters; target 3.2 at kn=8192
    cfg = gradual_config()
    assert lr_at(cfg, 8192, 50, 20) == pytest.approx(0.1 + 0.5 * (3.2 - 0.1))


def test_lr_hits_target_at_warmup_end():
    cfg = gradual_config()
    assert lr_at(cfg, 8192, 100, 20) == 3.2


def test_lr_milestone_decay():
    cfg = gradual_config()
    assert lr_at(cfg, 8192, 30 * 20, 20) == pytest.approx(0.32)
    assert lr_at(cfg, 8192, 60 * 20, 20) == pytest.approx(0.032)
    assert lr_at(cfg, 8192, 80 * 20, 20) == pytest.approx(0.0032)


def test_lr_constant_warmup():
    cfg = gradual_config(warmup="constant")
    assert lr_at(cfg, 8192, 0, 20) == 0.1
    assert lr_at(cfg, 8192, 99, 20) == 0.1
    assert lr_at(cfg, 8192, 100, 20) == 3.2


def test_warmup_monotone_and_continuous():
    cfg = gradual_config()
    ipe = 13
    lrs = [lr_at(cfg, 8192, it, ipe) for it in range(5 * ipe + 1)]
    increment = (3.2 - 0.1) / (5 * ipe)
    for a, b in zip(lrs, lrs[1:]):
        assert b >= a
        assert b - a <= increment * (1 + 1e-12)
    assert lrs[-1] == 3.2


def test_lr_piecewise_constant_between_milestones():
    cfg = gradual_config()
    ipe = 10
    values = {lr_at(cfg, 8192, it, ipe) for it in range(31 * ipe, 60 * ipe)}
    assert len(values) == 1


def test_milestone_inside_warmup_rejected():
    with pytest.raises(ValueError):
        gradual_config(milestones=(3, 60))


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(momentum=1.0)
    with pytest.raises(ValueError):
        SolverConfig(weight_decay=-1e-4)
    with pytest.raises(ValueError):
        SolverConfig(base_lr=0.0)
    with pytest.raises(ValueError):
        SolverConfig(milestones=(30, 30))


def test_apply_weight_decay():
    grad = np.array([1.0, 2.0])
    w = np.array([3.0, 4.0])
    assert np.array_equal(apply_weight_decay(grad, w, 0.0), grad)
    assert np.array_equal(apply_weight_decay(np.zeros(1), np.array([2.0]), 0.5), [1.0])
    with pytest.raises(ValueError):
        apply_weight_decay(np.zeros(2), np.zeros(3), 0.1)


def test_loss_scaling_differs_from_lr_scaling_with_decay():
    # Hand-traced 1-D trajectories of the decayed update, two steps each.
    eta, k, lam, g = 0.1, 8, 0.5, 0.4

    w_lr = 1.0
    w_loss = 1.0
    for _ in range(2):
        w_lr = w_lr - (k * eta) * (g + lam * w_lr)
        w_loss = w_loss - eta * (k * g + lam * w_loss)
    assert w_lr != w_loss

    w_lr, w_loss = 1.0, 1.0
    for _ in range(2):
        w_lr = w_lr - (k * eta) * g
        w_loss = w_loss - eta * (k * g)
    assert w_lr == pytest.approx(w_loss, rel=1e-12)


def test_step_reference_hand_values():
    state = MomentumState.zeros(1)
    w = np.zeros(1)
    grad = np.ones(1)
    state, w = step_reference(state, w, grad, lr=0.1, momentum=0.9)
    assert state.buffer[0] == 1.0 and w[0] == pytest.approx(-0.1)
    state, w = step_reference(state, w, grad, lr=0.1, momentum=0.9)
    assert state.buffer[0] == pytest.approx(1.9) and w[0] == pytest.approx(-0.29)


def test_momentum_zero_is_vanilla_sgd():
    state = MomentumState.zeros(2)
    w = np.array([1.0, -1.0])
    grad = np.array([0.5, 0.25])
    _, w_new = step_reference(state, w, grad, lr=0.2, momentum=0.0)
    assert np.array_equal(w_new, w - 0.2 * grad)


def test_absorbed_correction_hand_trace():
    # lr 0.1 -> 0.2 with unit gradients: corrected v2 must equal lr2 * u2.
    state = MomentumState.zeros(1)
    w = np.zeros(1)
    grad = np.ones(1)
    state, w = step_absorbed(state, w, grad, lr=0.1, momentum=0.9)
    assert state.buffer[0] == pytest.approx(0.1)
    state, w = step_absorbed(state, w, grad, lr=0.2, momentum=0.9, correction=True)
    assert state.buffer[0] == pytest.approx(0.38)  # 0.9*(0.2/0.1)*0.1 + 0.2

    state = MomentumState.zeros(1)
    w = np.zeros(1)
    state, w = step_absorbed(state, w, grad, lr=0.1, momentum=0.9)
    state, w = step_absorbed(state, w, grad, lr=0.2, momentum=0.9, correction=False)
    assert state.buffer[0] == pytest.approx(0.29)


def test_absorbed_matches_reference_at_fixed_lr():
    rng = np.random.default_rng(0)
    n = 20
    w_ref = rng.standard_normal(n)
    w_abs = w_ref.copy()
    s_ref = MomentumState.zeros(n)
    s_abs = MomentumState.zeros(n)
    for _ in range(200):
        grad = rng.standard_normal(n)
        s_ref, w_ref = step_reference(s_ref, w_ref, grad, lr=0.05, momentum=0.9)
        s_abs, w_abs = step_absorbed(s_abs, w_abs, grad, lr=0.05, momentum=0.9)
        assert np.allclose(w_ref, w_abs, rtol=1e-12, atol=1e-14)


def test_form_equivalence_random_schedule():
    rng = np.random.default_rng(1)
    n = 100
    w_ref = rng.standard_normal(n)
    w_abs = w_ref.copy()
    w_off = w_ref.copy()
    s_ref = MomentumState.zeros(n)
    s_abs = MomentumState.zeros(n)
    s_off = MomentumState.zeros(n)
    worst_on = 0.0
    worst_off = 0.0
    for _ in range(1000):
        grad = rng.standard_normal(n)
        lr = float(rng.uniform(0.01, 1.0))
        s_ref, w_ref = step_reference(s_ref, w_ref, grad, lr, 0.9)
        s_abs, w_abs = step_absorbed(s_abs, w_abs, grad, lr, 0.9, correction=True)
        s_off, w_off = step_absorbed(s_off, w_off, grad, lr, 0.9, correction=False)
        scale = max(float(np.abs(w_ref).max()), 1e-12)
        worst_on = max(worst_on, float(np.abs(w_ref - w_abs).max()) / scale)
        worst_off = max(worst_off, float(np.abs(w_ref - w_off).max()) / scale)
    assert worst_on <= 1e-10
    assert worst_off > 1e-3


def test_absorbed_zero_last_lr_rejected():
    state = MomentumState(buffer=np.zeros(1), last_lr=0.0)
    with pytest.raises(ZeroDivisionError):
        step_absorbed(state, np.zeros(1), np.ones(1), lr=0.1, momentum=0.9)
