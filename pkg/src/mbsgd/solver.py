"""Momentum SGD in reference and absorbed forms, plus the full lr schedule.

The learning-rate machinery covers linear/sqrt scaling from a reference
total minibatch size, constant or gradual warmup, and milestone decay. The
absorbed momentum form folds the lr into the update buffer; when the lr
changes between steps, multiplying the buffer by lr_new/lr_old (the
momentum correction) keeps it equivalent to the reference form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

WARMUP_NONE = "none"
WARMUP_CONSTANT = "constant"
WARMUP_GRADUAL = "gradual"

SCALING_LINEAR = "linear"
SCALING_SQRT = "sqrt"
SCALING_NONE = "none"

FORM_REFERENCE = "reference"
FORM_ABSORBED = "absorbed"


@dataclass
class SolverConfig:
    base_lr: float = 0.1
    ref_kn: int = 256
    momentum: float = 0.9
    weight_decay: float = 0.0001
    milestones: tuple = (30, 60, 80)
    decay_factor: float = 0.1
    warmup: str = WARMUP_NONE
    warmup_epochs: int = 5
    scaling: str = SCALING_LINEAR
    momentum_form: str = FORM_REFERENCE
    momentum_correction: bool = True

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0.0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.base_lr <= 0.0:
            raise ValueError(f"base_lr must be > 0, got {self.base_lr}")
        if self.ref_kn < 1:
            raise ValueError(f"ref_kn must be >= 1, got {self.ref_kn}")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError(f"milestones must be strictly increasing: {self.milestones}")
        if self.warmup not in (WARMUP_NONE, WARMUP_CONSTANT, WARMUP_GRADUAL):
            raise ValueError(f"unknown warmup policy: {self.warmup!r}")
        if self.scaling not in (SCALING_LINEAR, SCALING_SQRT, SCALING_NONE):
            raise ValueError(f"unknown scaling rule: {self.scaling!r}")
        if self.momentum_form not in (FORM_REFERENCE, FORM_ABSORBED):
            raise ValueError(f"unknown momentum form: {self.momentum_form!r}")
        if self.warmup != WARMUP_NONE and self.milestones:
            if min(self.milestones) < self.warmup_epochs:
                raise ValueError(
                    "milestones must not fall inside the warmup "
                    f"({self.milestones} vs warmup_epochs={self.warmup_epochs})"
                )


def linear_scaled_lr(base_lr: float, kn: int, ref_kn: int) -> float:
    """Scale the lr linearly with the total minibatch size: base_lr * kn/ref_kn."""
    return base_lr * kn / ref_kn


def sqrt_scaled_lr(base_lr: float, kn: int, ref_kn: int) -> float:
    """Square-root scaling alternative: base_lr * sqrt(kn/ref_kn)."""
    return base_lr * math.sqrt(kn / ref_kn)


def target_lr(config: SolverConfig, kn: int) -> float:
    """The post-warmup reference lr for a total minibatch of kn."""
    if config.scaling == SCALING_LINEAR:
        return linear_scaled_lr(config.base_lr, kn, config.ref_kn)
    if config.scaling == SCALING_SQRT:
        return sqrt_scaled_lr(config.base_lr, kn, config.ref_kn)
    return config.base_lr


def lr_at(config: SolverConfig, kn: int, iteration: int, iters_per_epoch: int) -> float:
    """Learning rate for a global iteration index.

    During warmup: the constant policy holds base_lr; the gradual policy
    ramps linearly from base_lr so that the scaled target is reached exactly
    at the end of warmup. Afterwards the target is multiplied by
    decay_factor once for every milestone epoch already passed.
    """
    if iters_per_epoch < 1:
        raise ValueError("iters_per_epoch must be >= 1")
    target = target_lr(config, kn)
    warmup_iters = (
        config.warmup_epochs * iters_per_epoch if config.warmup != WARMUP_NONE else 0
    )
    if iteration < warmup_iters:
        if config.warmup == WARMUP_CONSTANT:
            return config.base_lr
        return config.base_lr + (iteration / warmup_iters) * (target - config.base_lr)
    epoch = iteration // iters_per_epoch
    lr = target
    for milestone in config.milestones:
        if epoch >= milestone:
            lr *= config.decay_factor
    return lr


def apply_weight_decay(grad: np.ndarray, w: np.ndarray, weight_decay: float) -> np.ndarray:
    """grad + weight_decay * w.

    Applied after cross-worker aggregation of the sample-dependent
    gradients; folding the decay into a scaled loss instead would change
    the trajectory whenever weight_decay > 0.
    """
    if grad.shape != w.shape:
        raise ValueError(f"shape mismatch: {grad.shape} vs {w.shape}")
    if weight_decay == 0.0:
        return grad
    return grad + weight_decay * w


@dataclass
class MomentumState:
    """Momentum buffer plus the lr used at the most recent step."""

    buffer: np.ndarray
    last_lr: float | None = None
    iteration: int = 0

    @classmethod
    def zeros(cls, n: int) -> "MomentumState":
        return cls(buffer=np.zeros(n, dtype=np.float64))


def step_reference(
    state: MomentumState, w: np.ndarray, grad: np.ndarray, lr: float, momentum: float
) -> tuple[MomentumState, np.ndarray]:
    """u <- m*u + grad; w <- w - lr*u.

    grad must already be the fully aggregated gradient including weight
    decay. The buffer is lr-independent in this form.
    """
    raise_on_shape(state, w, grad)
    u = momentum * state.buffer + grad
    w_new = w - lr * u
    return MomentumState(u, last_lr=lr, iteration=state.iteration + 1), w_new


def step_absorbed(
    state: MomentumState,
    w: np.ndarray,
    grad: np.ndarray,
    lr: float,
    momentum: float,
    correction: bool = True,
) -> tuple[MomentumState, np.ndarray]:
    """v <- m*(lr/last_lr)*v + lr*grad; w <- w - v.

    With correction enabled the buffer is rescaled by lr/last_lr whenever
    the lr changes, which keeps the trajectory identical to the reference
    form; without it the two diverge as soon as the schedule moves. The
    factor is defined as 1 at the very first step.
    """
    raise_on_shape(state, w, grad)
    if correction and state.last_lr is not None:
        if state.last_lr == 0.0:
            raise ZeroDivisionError("momentum correction undefined for last_lr == 0")
        factor = lr / state.last_lr
    else:
        factor = 1.0
    v = momentum * factor * state.buffer + lr * grad
    w_new = w - v
    return MomentumState(v, last_lr=lr, iteration=state.iteration + 1), w_new


def raise_on_shape(state: MomentumState, w: np.ndarray, grad: np.ndarray) -> None:
    if state.buffer.shape != w.shape or w.shape != grad.shape:
        raise ValueError(
            f"shape mismatch: buffer {state.buffer.shape}, w {w.shape}, grad {grad.shape}"
        )
