"""Dense feedforward networks with analytic gradients, in float64.

Parameters live in a single flat vector. Layer ``l`` owns a weight matrix of
shape ``(out_l, in_l + 1)`` whose last column is the bias; matrices are stored
row-major one after another, so ``params[offset:offset + out*(in+1)]``
reshaped to ``(out, in+1)`` is a view of that layer.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

import numpy as np


class Activation(str, Enum):
    RELU = "relu"
    TANH = "tanh"


class ShapeError(ValueError):
    """Input features do not match the model's input dimension."""


class LabelError(ValueError):
    """A label lies outside ``[0, K)``."""


class LayerSlot(NamedTuple):
    offset: int
    out: int
    in_aug: int  # fan-in plus the bias column

    @property
    def size(self) -> int:
        return self.out * self.in_aug


@dataclass(frozen=True)
class ModelSpec:
    layer_dims: tuple[int, ...]
    activation: Activation = Activation.RELU
    layout: tuple[LayerSlot, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2:
            raise ValueError("layer_dims needs at least an input and an output dimension")
        if any(d < 1 for d in dims):
            raise ValueError(f"all layer dims must be >= 1, got {dims}")
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "activation", Activation(self.activation))
        slots, offset = [], 0
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            slots.append(LayerSlot(offset, fan_out, fan_in + 1))
            offset += fan_out * (fan_in + 1)
        object.__setattr__(self, "layout", tuple(slots))

    @property
    def n_params(self) -> int:
        last = self.layout[-1]
        return last.offset + last.size

    @property
    def n_layers(self) -> int:
        return len(self.layout)

    @property
    def n_inputs(self) -> int:
        return self.layer_dims[0]

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    def weights(self, params: np.ndarray) -> list[np.ndarray]:
        """Per-layer ``(out, in+1)`` views into ``params``."""
        if params.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} parameters, got shape {params.shape}")
        return [params[s.offset:s.offset + s.size].reshape(s.out, s.in_aug) for s in self.layout]


def _act(z: np.ndarray, kind: Activation) -> np.ndarray:
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_deriv(z: np.ndarray, h: np.ndarray, kind: Activation) -> np.ndarray:
    if kind is Activation.RELU:
        return (z > 0).astype(np.float64)
    return 1.0 - h * h


def augment(a: np.ndarray) -> np.ndarray:
    """Append the constant-1 bias input to each row."""
    return np.concatenate([a, np.ones((a.shape[0], 1), dtype=a.dtype)], axis=1)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class ForwardCache(NamedTuple):
    inputs: list[np.ndarray]  # bias-augmented input to each layer, (N, in_l + 1)
    pre: list[np.ndarray]  # pre-activations of each layer, (N, out_l)
    post: list[np.ndarray]  # hidden activations (last layer has none)
    logits: np.ndarray


def _as_batch(spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.n_inputs:
        raise ShapeError(f"expected features of width {spec.n_inputs}, got shape {x.shape}")
    return x


def forward_cache(params: np.ndarray, spec: ModelSpec, x: np.ndarray) -> ForwardCache:
    x = _as_batch(spec, x)
    weights = spec.weights(params)
    inputs, pre, post = [], [], []
    a = x
    for i, w in enumerate(weights):
        a_aug = augment(a)
        z = a_aug @ w.T
        inputs.append(a_aug)
        pre.append(z)
        if i < len(weights) - 1:
            a = _act(z, spec.activation)
            post.append(a)
        else:
            a = z
    return ForwardCache(inputs, pre, post, a)


def logits(params: np.ndarray, spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    return forward_cache(params, spec, x).logits


def forward(params: np.ndarray, spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    """Class probabilities. A 1-D ``x`` gives a length-K vector, a 2-D batch an (N, K) array."""
    single = np.ndim(x) == 1
    p = softmax(logits(params, spec, x))
    return p[0] if single else p


def backward(params: np.ndarray, spec: ModelSpec, cache: ForwardCache, delta_out: np.ndarray) -> list[np.ndarray]:
    """Backpropagate per-sample output deltas ``dLoss/dlogits`` of shape (N, K).

    Returns the per-sample pre-activation deltas of every layer, first layer first.
    """
    weights = spec.weights(params)
    deltas = [delta_out]
    delta = delta_out
    for l in range(len(weights) - 1, 0, -1):
        back = delta @ weights[l][:, :-1]
        delta = back * _act_deriv(cache.pre[l - 1], cache.post[l - 1], spec.activation)
        deltas.append(delta)
    deltas.reverse()
    return deltas


def _check_labels(spec: ModelSpec, y: np.ndarray, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise LabelError("labels must be integers")
        y = y.astype(np.int64)
    if n and (y.min() < 0 or y.max() >= spec.n_classes):
        raise LabelError(f"labels must lie in [0, {spec.n_classes}), got range [{y.min()}, {y.max()}]")
    return y


def loss_and_grad(params: np.ndarray, spec: ModelSpec, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its exact gradient."""
    x = _as_batch(spec, x)
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    y = _check_labels(spec, y, n)
    cache = forward_cache(params, spec, x)
    logp = log_softmax(cache.logits)
    loss = -float(logp[np.arange(n), y].mean())

    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    deltas = backward(params, spec, cache, delta)
    grad = np.empty_like(params)
    for slot, d, a in zip(spec.layout, deltas, cache.inputs):
        grad[slot.offset:slot.offset + slot.size] = (d.T @ a).ravel()
    return loss, grad


def accuracy(params: np.ndarray, spec: ModelSpec, x: np.ndarray, y: np.ndarray) -> float:
    pred = logits(params, spec, x).argmax(axis=1)
    return float(np.mean(pred == np.asarray(y)))


def init_params(spec: ModelSpec, seed: int | np.random.SeedSequence) -> np.ndarray:
    """Uniform fan-in init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases alike."""
    rng = np.random.default_rng(seed)
    params = np.empty(spec.n_params)
    for slot in spec.layout:
        bound = 1.0 / math.sqrt(slot.in_aug - 1)
        params[slot.offset:slot.offset + slot.size] = rng.uniform(-bound, bound, size=slot.size)
    return params


@dataclass
class SGDMomentum:
    """Heavy-ball SGD in the torch convention: ``v = mu*v + g; w -= lr*v``."""

    lr: float = 0.01
    momentum: float = 0.9
    velocity: np.ndarray | None = None

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.velocity is None:
            self.velocity = np.zeros_like(params)
        self.velocity = self.momentum * self.velocity + grad
        return params - self.lr * self.velocity


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(state: Adam, params: np.ndarray, grad: np.ndarray) -> tuple[np.ndarray, Adam]:
    return state.step(params, grad), state


def train_sgd(
    params: np.ndarray,
    spec: ModelSpec,
    x: np.ndarray,
    y: np.ndarray,
    epochs: int,
    lr: float = 0.01,
    momentum: float = 0.9,
    batch_size: int = 64,
    seed: int | np.random.SeedSequence = 0,
) -> np.ndarray:
    """Minibatch SGD with momentum on mean cross-entropy; returns the last iterate."""
    x = _as_batch(spec, x)
    n = x.shape[0]
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    y = _check_labels(spec, y, n)
    rng = np.random.default_rng(seed)
    opt = SGDMomentum(lr=lr, momentum=momentum)
    w = params.copy()
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            _, g = loss_and_grad(w, spec, x[idx], y[idx])
            w = opt.step(w, g)
    return w

