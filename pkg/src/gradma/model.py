"""Numpy MLP classifiers over flat parameter vectors.

Parameters live in one contiguous float64 vector. Layers are laid out in
order; each layer contributes its weight matrix of shape
``(fan_in, fan_out)`` in row-major order followed by its bias of length
``fan_out``. Hidden layers use ReLU and the output is a softmax over
``num_classes`` trained with mean cross-entropy. An empty ``hidden_dims``
gives multinomial logistic regression.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

EVAL_CHUNK = 4096


class NonFiniteError(FloatingPointError):
    """Raised when a forward pass produces inf/nan."""


class Batch(NamedTuple):
    features: np.ndarray
    labels: np.ndarray


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.num_classes)
        if any(int(v) < 1 for v in dims):
            raise ValueError(f"all layer sizes must be >= 1, got {dims}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims, self.num_classes)
        return list(zip(dims[:-1], dims[1:]))

    @property
    def num_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_dims)

    def bias_slices(self) -> list[slice]:
        out, off = [], 0
        for i, o in self.layer_dims:
            off += i * o
            out.append(slice(off, off + o))
            off += o
        return out


def unflatten(arch: Architecture, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views ``(W, b)`` per layer into ``params`` (no copies)."""
    if params.shape != (arch.num_params,):
        raise ValueError(f"expected {arch.num_params} parameters, got shape {params.shape}")
    layers, off = [], 0
    for i, o in arch.layer_dims:
        W = params[off:off + i * o].reshape(i, o)
        off += i * o
        b = params[off:off + o]
        off += o
        layers.append((W, b))
    return layers


def init_params(arch: Architecture, seed: int) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = np.zeros(arch.num_params)
    for W, _ in unflatten(arch, params):
        fan_in, fan_out = W.shape
        s = np.sqrt(6.0 / (fan_in + fan_out))
        W[...] = rng.uniform(-s, s, size=W.shape)
    return params


def _forward(layers, X):
    acts = [X]
    h = X
    for W, b in layers[:-1]:
        h = h @ W + b
        np.maximum(h, 0.0, out=h)
        acts.append(h)
    W, b = layers[-1]
    logits = h @ W + b
    if not np.all(np.isfinite(logits)):
        raise NonFiniteError("non-finite logits in forward pass")
    return acts, logits


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _nll(logp, labels):
    return -logp[np.arange(labels.shape[0]), labels]


def loss_and_grad(arch: Architecture, params: np.ndarray, batch) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over ``batch`` and its exact gradient."""
    X = np.asarray(batch.features, dtype=np.float64)
    y = np.asarray(batch.labels)
    n = X.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    layers = unflatten(arch, params)
    acts, logits = _forward(layers, X)
    logp = _log_softmax(logits)
    loss = float(_nll(logp, y).mean())

    grad = np.empty_like(params)
    glayers = unflatten(arch, grad)
    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    for k in range(len(layers) - 1, -1, -1):
        gW, gb = glayers[k]
        np.matmul(acts[k].T, delta, out=gW)
        gb[...] = delta.sum(axis=0)
        if k > 0:
            delta = delta @ layers[k][0].T
            delta *= acts[k] > 0
    return loss, grad


def full_grad(arch: Architecture, params: np.ndarray, dataset, chunk: int = EVAL_CHUNK) -> np.ndarray:
    """Gradient of the mean loss over the whole dataset, accumulated in chunks."""
    n = dataset.labels.shape[0]
    if n == 0:
        raise ValueError("full_grad over an empty dataset")
    if n <= chunk:
        return loss_and_grad(arch, params, dataset)[1]
    total = np.zeros_like(params)
    for start in range(0, n, chunk):
        part = Batch(dataset.features[start:start + chunk], dataset.labels[start:start + chunk])
        _, g = loss_and_grad(arch, params, part)
        total += part.labels.shape[0] * g
    return total / n


def predict_logits(arch: Architecture, params: np.ndarray, features: np.ndarray) -> np.ndarray:
    return _forward(unflatten(arch, params), np.asarray(features, dtype=np.float64))[1]


def evaluate(arch: Architecture, params: np.ndarray, dataset, chunk: int = EVAL_CHUNK) -> tuple[float, float]:
    """Accuracy (argmax, ties to the lowest class) and mean loss."""
    n = dataset.labels.shape[0]
    if n == 0:
        raise ValueError("evaluate on an empty dataset")
    layers = unflatten(arch, params)
    correct, loss_sum = 0, 0.0
    for start in range(0, n, chunk):
        X = np.asarray(dataset.features[start:start + chunk], dtype=np.float64)
        y = np.asarray(dataset.labels[start:start + chunk])
        _, logits = _forward(layers, X)
        correct += int(np.count_nonzero(np.argmax(logits, axis=1) == y))
        loss_sum += float(_nll(_log_softmax(logits), y).sum())
    return correct / n, loss_sum / n
