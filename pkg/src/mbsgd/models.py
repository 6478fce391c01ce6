"""Tiny differentiable models: linear, MLP, and residual blocks with BatchNorm.

The loss is split into a sample-dependent part (what `forward_loss` returns
and `backward` differentiates) and the L2 term, which the solver adds after
gradient aggregation. BatchNorm statistics are always computed over the batch
actually passed in, so per-worker semantics fall out of the call structure.

Gradients are flattened in a fixed order: layers in sequence, and within a
layer (weights, bias) for linear, (gamma, beta) for BatchNorm. Residual
blocks contribute their inner layers in sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import RngState, gauss_vector

TRAIN = "train"
EVAL = "eval"

BN_EPS = 1e-5
BN_STAT_MOMENTUM = 0.9


@dataclass
class Batch:
    """A minibatch: inputs (n, dim) float64 and integer class labels (n,)."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ValueError(f"inputs must be 2-D (n, dim), got shape {self.inputs.shape}")
        if len(self.labels) != self.inputs.shape[0]:
            raise ValueError("labels length must match batch size")

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


class Linear:
    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.weight = np.asarray(weight, dtype=np.float64)  # (out, in)
        self.bias = np.asarray(bias, dtype=np.float64)  # (out,)
        self._x = None

    def forward(self, x, mode, update_running):
        self._x = x
        return x @ self.weight.T + self.bias

    def backward(self, d_out):
        d_w = d_out.T @ self._x
        d_b = d_out.sum(axis=0)
        d_x = d_out @ self.weight
        return d_x, [d_w, d_b]

    def params(self):
        return [self.weight, self.bias]

    def set_params(self, arrays):
        self.weight, self.bias = arrays


class BatchNorm:
    """Per-column batch normalization over the minibatch dimension.

    Train mode normalizes with the statistics of the batch at hand (biased
    variance, divide by n) and updates the running averages; eval mode uses
    the running averages and never mutates them.
    """

    def __init__(self, gamma, beta, eps=BN_EPS, stat_momentum=BN_STAT_MOMENTUM):
        self.gamma = np.asarray(gamma, dtype=np.float64)
        self.beta = np.asarray(beta, dtype=np.float64)
        self.eps = float(eps)
        self.stat_momentum = float(stat_momentum)
        self.running_mean = np.zeros_like(self.gamma)
        self.running_var = np.ones_like(self.gamma)
        self._cache = None

    def forward(self, x, mode, update_running):
        if mode == TRAIN:
            if x.shape[0] < 1:
                raise ValueError("BatchNorm train mode requires n >= 1")
            mean = x.mean(axis=0)
            var = x.var(axis=0)  # biased: divide by n
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean) * inv_std
            if update_running:
                m = self.stat_momentum
                self.running_mean = m * self.running_mean + (1.0 - m) * mean
                self.running_var = m * self.running_var + (1.0 - m) * var
            self._cache = (xhat, inv_std)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean) * inv_std
            self._cache = None
        return self.gamma * xhat + self.beta

    def backward(self, d_out):
        if self._cache is None:
            raise RuntimeError("BatchNorm.backward requires a prior train-mode forward")
        xhat, inv_std = self._cache
        n = xhat.shape[0]
        d_gamma = (d_out * xhat).sum(axis=0)
        d_beta = d_out.sum(axis=0)
        d_xhat = d_out * self.gamma
        d_x = (inv_std / n) * (
            n * d_xhat - d_xhat.sum(axis=0) - xhat * (d_xhat * xhat).sum(axis=0)
        )
        return d_x, [d_gamma, d_beta]

    def params(self):
        return [self.gamma, self.beta]

    def set_params(self, arrays):
        self.gamma, self.beta = arrays


class Relu:
    def __init__(self):
        self._mask = None

    def forward(self, x, mode, update_running):
        self._mask = x > 0.0
        return x * self._mask

    def backward(self, d_out):
        return d_out * self._mask, []

    def params(self):
        return []

    def set_params(self, arrays):
        pass


class ResidualBlock:
    """Identity shortcut around a (linear, BN, relu, linear, BN) body.

    The body ends at the second BN so that zeroing its gamma makes the
    block exactly the identity at initialization while the gamma itself
    still receives gradient (a trailing relu would pin the body, and its
    gradient, at zero for good).
    """

    def __init__(self, inner: list):
        self.inner = inner

    def forward(self, x, mode, update_running):
        h = x
        for layer in self.inner:
            h = layer.forward(h, mode, update_running)
        return x + h

    def backward(self, d_out):
        d = d_out
        grads_rev = []
        for layer in reversed(self.inner):
            d, g = layer.backward(d)
            grads_rev.append(g)
        grads = []
        for g in reversed(grads_rev):
            grads.extend(g)
        return d_out + d, grads

    def params(self):
        out = []
        for layer in self.inner:
            out.extend(layer.params())
        return out

    def set_params(self, arrays):
        i = 0
        for layer in self.inner:
            n = len(layer.params())
            layer.set_params(arrays[i : i + n])
            i += n


CROSS_ENTROPY = "cross_entropy"
SUM_OUTPUT = "sum_output"


@dataclass
class ModelSpec:
    """Architecture description: dims, optional BN, optional residual blocks.

    loss picks the per-sample term: mean cross-entropy over softmax logits,
    or the mean of summed outputs (a loss linear in the parameters, whose
    gradient is independent of them -- used by the step-equivalence oracles).
    """

    input_dim: int
    classes: int
    hidden: tuple = ()
    bn: bool = False
    residual_blocks: int = 0
    loss: str = CROSS_ENTROPY

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.input_dim < 1 or self.classes < 1:
            raise ValueError("input_dim and classes must be >= 1")
        if self.loss not in (CROSS_ENTROPY, SUM_OUTPUT):
            raise ValueError(f"unknown loss kind: {self.loss!r}")


class Model:
    def __init__(self, layers: list, loss: str = CROSS_ENTROPY):
        self.layers = layers
        self.loss = loss
        self._forward_cache = None

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self._param_arrays())

    def _param_arrays(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def get_params(self) -> np.ndarray:
        arrays = self._param_arrays()
        if not arrays:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in arrays])

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.param_count:
            raise ValueError(f"expected {self.param_count} params, got {flat.size}")
        offset = 0
        for layer in self.layers:
            arrays = []
            for p in layer.params():
                arrays.append(flat[offset : offset + p.size].reshape(p.shape).copy())
                offset += p.size
            layer.set_params(arrays)
        self._forward_cache = None

    def forward_loss(self, batch: Batch, mode: str = TRAIN, update_running=None) -> float:
        """Mean sample-dependent loss over the batch (no L2 term).

        In train mode BN layers normalize with this batch's statistics, so
        each sample's loss depends on its companions; eval mode uses running
        statistics and leaves the model unmodified.
        """
        if mode not in (TRAIN, EVAL):
            raise ValueError(f"mode must be {TRAIN!r} or {EVAL!r}")
        if batch.size < 1:
            raise ValueError("empty batch")
        if batch.inputs.shape[1] != self._input_dim():
            raise ValueError(
                f"batch dim {batch.inputs.shape[1]} != model input dim {self._input_dim()}"
            )
        if update_running is None:
            update_running = mode == TRAIN
        h = batch.inputs
        for layer in self.layers:
            h = layer.forward(h, mode, update_running)
        n = batch.size
        if self.loss == SUM_OUTPUT:
            loss = float(h.sum()) / n
            d_logits = np.full_like(h, 1.0 / n)
        else:
            logits = h - h.max(axis=1, keepdims=True)
            log_z = np.log(np.exp(logits).sum(axis=1))
            log_probs = logits - log_z[:, None]
            loss = float(-log_probs[np.arange(n), batch.labels].mean())
            d_logits = np.exp(log_probs)
            d_logits[np.arange(n), batch.labels] -= 1.0
            d_logits /= n
        self._forward_cache = (mode, d_logits, batch)
        return loss

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        """Class predictions (argmax of logits) in eval mode."""
        self._forward_cache = None  # layer caches are clobbered below
        h = np.asarray(inputs, dtype=np.float64)
        for layer in self.layers:
            h = layer.forward(h, EVAL, update_running=False)
        return h.argmax(axis=1)

    def backward(self, batch: Batch) -> np.ndarray:
        """Gradient of the mean sample-dependent loss, flattened.

        Requires a preceding train-mode forward_loss on the same batch; the
        returned vector has exactly param_count elements and excludes the
        weight-decay term.
        """
        if self._forward_cache is None:
            raise RuntimeError("backward called without a preceding forward_loss")
        mode, d, forwarded = self._forward_cache
        if mode != TRAIN:
            raise RuntimeError("backward requires a train-mode forward_loss")
        if forwarded is not batch and not np.array_equal(forwarded.inputs, batch.inputs):
            raise RuntimeError("backward batch differs from the forwarded batch")
        grads_rev = []
        for layer in reversed(self.layers):
            d, g = layer.backward(d)
            grads_rev.append(g)
        flat = []
        for g in reversed(grads_rev):
            flat.extend(a.ravel() for a in g)
        self._forward_cache = None
        if not flat:
            return np.zeros(0)
        return np.concatenate(flat)

    def _input_dim(self) -> int:
        for layer in self.layers:
            if isinstance(layer, Linear):
                return layer.weight.shape[1]
            if isinstance(layer, ResidualBlock):
                return layer.inner[0].weight.shape[1]
        raise RuntimeError("model has no linear layer")

    def bn_layers(self) -> list:
        """All BatchNorm layers in order, descending into residual blocks."""
        out = []

        def visit(layer):
            if isinstance(layer, BatchNorm):
                out.append(layer)
            elif isinstance(layer, ResidualBlock):
                for inner in layer.inner:
                    visit(inner)

        for layer in self.layers:
            visit(layer)
        return out


def _he_linear(state: RngState, fan_in: int, fan_out: int, std: float) -> tuple[Linear, RngState]:
    w, state = gauss_vector(state, fan_out * fan_in, std)
    return Linear(w.reshape(fan_out, fan_in), np.zeros(fan_out)), state


def init_model(spec: ModelSpec, seed: int, gamma_last_init: float = 0.0) -> Model:
    """Build and initialize a model deterministically from a seed.

    Hidden linears use zero-mean Gaussians with std sqrt(2/fan_in); the final
    classifier uses std 0.01; biases start at zero. BN scales start at 1
    except the last BN of each residual block, which starts at
    gamma_last_init (0 makes every block an exact identity).
    """
    state = RngState(seed)
    layers: list = []
    width = spec.input_dim
    for h in spec.hidden:
        lin, state = _he_linear(state, width, h, np.sqrt(2.0 / width))
        layers.append(lin)
        if spec.bn:
            layers.append(BatchNorm(np.ones(h), np.zeros(h)))
        layers.append(Relu())
        width = h
    for _ in range(spec.residual_blocks):
        lin1, state = _he_linear(state, width, width, np.sqrt(2.0 / width))
        lin2, state = _he_linear(state, width, width, np.sqrt(2.0 / width))
        inner = [
            lin1,
            BatchNorm(np.ones(width), np.zeros(width)),
            Relu(),
            lin2,
            BatchNorm(np.full(width, float(gamma_last_init)), np.zeros(width)),
        ]
        layers.append(ResidualBlock(inner))
    classifier, state = _he_linear(state, width, spec.classes, 0.01)
    layers.append(classifier)
    return Model(layers, loss=spec.loss)


def bn_forward(activations: np.ndarray, layer: BatchNorm, mode: str = TRAIN) -> np.ndarray:
    """Standalone BN application (train mode updates the running averages)."""
    x = np.asarray(activations, dtype=np.float64)
    if mode == TRAIN and x.shape[0] < 1:
        raise ValueError("BatchNorm train mode requires n >= 1")
    return layer.forward(x, mode, update_running=(mode == TRAIN))
