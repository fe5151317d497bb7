"""Minimal feedforward networks with explicit backpropagation.

Exactly the pieces this pipeline needs: ReLU hidden layers, an identity or
softmax output head, Huber and cross-entropy losses, plain SGD with an
optional adaptive-moment update. No autodiff graph.

Model file layout (``mlp-v1``, text/JSON):
    {"format": "mlp-v1", "layer_sizes": [in, h1, ..., out],
     "params": [flat float list: W1 row-major, b1, W2, b2, ...]}
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MODEL_FORMAT = "mlp-v1"


class ShapeError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    """Raised when a gradient or parameter turns non-finite."""


def huber(delta, kappa: float):
    """Piecewise quadratic/linear loss: 0.5*d^2 for |d| <= kappa, else kappa*(|d| - 0.5*kappa)."""
    if kappa <= 0:
        raise ValueError("kappa must be > 0")
    d = np.asarray(delta, dtype=float)
    a = np.abs(d)
    out = np.where(a <= kappa, 0.5 * d * d, kappa * (a - 0.5 * kappa))
    return float(out) if np.isscalar(delta) else out


def huber_grad(delta, kappa: float):
    """d huber / d delta: the residual clipped to [-kappa, kappa]."""
    if kappa <= 0:
        raise ValueError("kappa must be > 0")
    return np.clip(delta, -kappa, kappa)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


class Mlp:
    """Fully connected net: ReLU on hidden layers, identity output.

    Weight matrices have shape (fan_out, fan_in); ``forward`` accepts a
    single vector or a (batch, fan_in) matrix.
    """

    def __init__(self, layer_sizes, rng: np.random.Generator | None = None):
        if len(layer_sizes) < 2:
            raise ShapeError("need at least input and output layers")
        self.layer_sizes = tuple(int(s) for s in layer_sizes)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(self.layer_sizes, self.layer_sizes[1:]):
            if rng is None:
                w = np.zeros((fan_out, fan_in))
            else:
                bound = 1.0 / np.sqrt(fan_in)
                w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))

    @property
    def input_size(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_size(self) -> int:
        return self.layer_sizes[-1]

    def forward(self, x) -> np.ndarray:
        """Deterministic forward pass; returns the identity-head output."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        a = x[None, :] if single else x
        if a.shape[-1] != self.input_size:
            raise ShapeError(f"input width {a.shape[-1]} != {self.input_size}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = a @ w.T + b
            if i < len(self.weights) - 1:
                a = np.maximum(a, 0.0)
        return a[0] if single else a

    def _forward_cached(self, x: np.ndarray):
        """Forward pass keeping pre-activations for backprop."""
        pre = []
        a = x
        acts = [a]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w.T + b
            pre.append(z)
            a = np.maximum(z, 0.0) if i < len(self.weights) - 1 else z
            acts.append(a)
        return pre, acts

    def _backward(self, pre, acts, grad_out: np.ndarray):
        """Gradients of the batch loss w.r.t. every weight and bias."""
        gw = [None] * len(self.weights)
        gb = [None] * len(self.biases)
        g = grad_out
        for layer in range(len(self.weights) - 1, -1, -1):
            gw[layer] = g.T @ acts[layer]
            gb[layer] = g.sum(axis=0)
            if layer > 0:
                g = (g @ self.weights[layer]) * (pre[layer - 1] > 0.0)
        return gw, gb

    # -- flat parameter view (serialization, finite differences) -----------

    def get_params(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        idx = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = flat[idx:idx + w.size].reshape(w.shape).copy()
            idx += w.size
            self.biases[i] = flat[idx:idx + b.size].copy()
            idx += b.size
        if idx != flat.size:
            raise ShapeError(f"parameter vector size {flat.size}, expected {idx}")

    def copy(self) -> "Mlp":
        dup = Mlp(self.layer_sizes)
        dup.set_params(self.get_params())
        return dup

    def save(self, path: str | Path) -> None:
        payload = {
            "format": MODEL_FORMAT,
            "layer_sizes": list(self.layer_sizes),
            "params": [float(v) for v in self.get_params()],
        }
        Path(path).write_text(json.dumps(payload) + "\n")

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "layer_sizes": list(self.layer_sizes),
            "params": [float(v) for v in self.get_params()],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "Mlp":
        if payload.get("format") != MODEL_FORMAT:
            raise ValueError(f"unsupported model format {payload.get('format')!r}")
        net = cls(payload["layer_sizes"])
        net.set_params(np.asarray(payload["params"], dtype=float))
        return net

    @classmethod
    def load(cls, path: str | Path) -> "Mlp":
        return cls.from_dict(json.loads(Path(path).read_text()))


class Optimizer:
    """SGD by default; ``kind='adam'`` enables adaptive moments."""

    def __init__(self, net: Mlp, lr: float, kind: str = "sgd",
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.net = net
        self.lr = lr
        self.kind = kind
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        if kind == "adam":
            self._m = [np.zeros_like(p) for p in net.weights + net.biases]
            self._v = [np.zeros_like(p) for p in net.weights + net.biases]

    def apply(self, gw, gb) -> None:
        grads = gw + gb
        params = self.net.weights + self.net.biases
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise TrainingDivergedError("non-finite gradient")
        self.t += 1
        if self.kind == "sgd":
            for p, g in zip(params, grads):
                p -= self.lr * g
            return
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for i, (p, g) in enumerate(zip(params, grads)):
            self._m[i] = self.beta1 * self._m[i] + (1 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1 - self.beta2) * g * g
            p -= self.lr * (self._m[i] / b1t) / (np.sqrt(self._v[i] / b2t) + self.eps)


def batch_loss_and_grad(net: Mlp, inputs: np.ndarray, targets: np.ndarray, loss: str,
                        kappa: float = 1.0, unit_indices: np.ndarray | None = None):
    """Mean batch loss and its parameter gradients.

    loss='huber': ``targets`` are scalars regressed by output unit
    ``unit_indices[i]`` (default unit 0).
    loss='cross_entropy': ``targets`` are integer class labels for a softmax
    over the output layer.
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    n = inputs.shape[0]
    if n == 0:
        raise ValueError("empty minibatch")
    pre, acts = net._forward_cached(inputs)
    out = acts[-1]

    if loss == "huber":
        targets = np.asarray(targets, dtype=float).reshape(n)
        if unit_indices is None:
            unit_indices = np.zeros(n, dtype=int)
        unit_indices = np.asarray(unit_indices, dtype=int)
        delta = out[np.arange(n), unit_indices] - targets
        value = float(np.mean(huber(delta, kappa)))
        grad_out = np.zeros_like(out)
        grad_out[np.arange(n), unit_indices] = huber_grad(delta, kappa) / n
    elif loss == "cross_entropy":
        labels = np.asarray(targets, dtype=int).reshape(n)
        probs = softmax(out)
        value = float(np.mean(-np.log(np.clip(probs[np.arange(n), labels], 1e-12, None))))
        grad_out = probs
        grad_out[np.arange(n), labels] -= 1.0
        grad_out /= n
    else:
        raise ValueError(f"unknown loss {loss!r}")

    gw, gb = net._backward(pre, acts, grad_out)
    return value, gw, gb


def train_step(net: Mlp, inputs, targets, loss: str, lr: float, kappa: float = 1.0,
               unit_indices=None, optimizer: Optimizer | None = None) -> float:
    """One gradient-descent update on a mini-batch; returns the batch loss."""
    value, gw, gb = batch_loss_and_grad(net, inputs, targets, loss, kappa, unit_indices)
    if not np.isfinite(value):
        raise TrainingDivergedError(f"non-finite loss {value}")
    if optimizer is None:
        optimizer = Optimizer(net, lr)
    optimizer.apply(gw, gb)
    return value
