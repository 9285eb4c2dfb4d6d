"""Small feedforward network with reverse-mode gradients, plus Adam.

The network is deliberately minimal: dense layers, ReLU on hidden layers,
identity output. Parameters live in plain numpy arrays so trainers can
flatten them, clip global norms and drive Adam without framework overhead.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class Mlp:
    sizes: list
    weights: list   # per layer, shape (n_in, n_out)
    biases: list    # per layer, shape (n_out,)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


def init_mlp(sizes, rng: np.random.Generator, output_scale: float = 0.01) -> Mlp:
    """He-uniform hidden layers, zero biases, scaled-down output layer."""
    weights, biases = [], []
    last = len(sizes) - 2
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = np.sqrt(6.0 / n_in)
        w = rng.uniform(-limit, limit, size=(n_in, n_out))
        if i == last:
            w *= output_scale
        weights.append(w)
        biases.append(np.zeros(n_out))
    return Mlp(list(sizes), weights, biases)


def forward(mlp: Mlp, features) -> np.ndarray:
    x = np.asarray(features, dtype=float)
    if x.shape != (mlp.sizes[0],):
        raise ValueError(f"expected {mlp.sizes[0]} features, got shape {x.shape}")
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        x = x @ w + b
        if i < len(mlp.weights) - 1:
            x = np.maximum(x, 0.0)
    return x


def forward_cached(mlp: Mlp, features):
    """Forward pass retaining per-layer inputs for the backward sweep."""
    x = np.asarray(features, dtype=float)
    if x.shape != (mlp.sizes[0],):
        raise ValueError(f"expected {mlp.sizes[0]} features, got shape {x.shape}")
    inputs = []
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        inputs.append(x)
        x = x @ w + b
        if i < len(mlp.weights) - 1:
            x = np.maximum(x, 0.0)
    return x, inputs


def backward(mlp: Mlp, cache, output_cotangent):
    """Exact reverse-mode sweep.

    Returns ((weight_grads, bias_grads), input_gradient); the input gradient
    feeds BPTT chains through the feature map.
    """
    inputs = cache
    if len(inputs) != len(mlp.weights):
        raise ValueError("stale or mismatched forward cache")
    grad = np.asarray(output_cotangent, dtype=float)
    w_grads = [None] * len(mlp.weights)
    b_grads = [None] * len(mlp.weights)
    for i in reversed(range(len(mlp.weights))):
        x_in = inputs[i]
        if i < len(mlp.weights) - 1:
            # ReLU was applied to this layer's output downstream
            pre = x_in @ mlp.weights[i] + mlp.biases[i]
            grad = grad * (pre > 0.0)
        b_grads[i] = grad.copy()
        w_grads[i] = np.outer(x_in, grad)
        grad = mlp.weights[i] @ grad
    return (w_grads, b_grads), grad


def flatten_params(mlp: Mlp) -> np.ndarray:
    parts = []
    for w, b in zip(mlp.weights, mlp.biases):
        parts.append(w.ravel())
        parts.append(b.ravel())
    return np.concatenate(parts)


def unflatten_params(mlp: Mlp, flat) -> None:
    flat = np.asarray(flat, dtype=float)
    pos = 0
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        mlp.weights[i] = flat[pos:pos + w.size].reshape(w.shape).copy()
        pos += w.size
        mlp.biases[i] = flat[pos:pos + b.size].copy()
        pos += b.size
    if pos != flat.size:
        raise ValueError("parameter vector length mismatch")


def flatten_grads(mlp: Mlp, grads) -> np.ndarray:
    w_grads, b_grads = grads
    parts = []
    for wg, bg in zip(w_grads, b_grads):
        parts.append(wg.ravel())
        parts.append(bg.ravel())
    return np.concatenate(parts)


@dataclass
class AdamState:
    """First/second moment accumulators with bias-corrected updates."""

    lr: float
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1.0e-8

    @classmethod
    def for_size(cls, n: int, lr: float) -> "AdamState":
        return cls(lr=lr, m=np.zeros(n), v=np.zeros(n))


def adam_step(state: AdamState, params, grads) -> np.ndarray:
    """One Adam update; mutates the accumulator state, returns new params."""
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("parameter/gradient shape mismatch")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------

def mlp_to_dict(mlp: Mlp, feature_scaling, variant_tag: str) -> dict:
    return {
        "sizes": list(mlp.sizes),
        "weights": [w.ravel().tolist() for w in mlp.weights],
        "biases": [b.tolist() for b in mlp.biases],
        "feature_scaling": list(np.asarray(feature_scaling, dtype=float)),
        "variant": variant_tag,
    }


def mlp_from_dict(data: dict):
    sizes = data["sizes"]
    weights = [np.array(w).reshape(n_in, n_out)
               for w, n_in, n_out in zip(data["weights"], sizes[:-1], sizes[1:])]
    biases = [np.array(b) for b in data["biases"]]
    mlp = Mlp(list(sizes), weights, biases)
    return mlp, np.array(data["feature_scaling"]), data["variant"]


def save_mlp(mlp: Mlp, path, feature_scaling, variant_tag: str) -> None:
    Path(path).write_text(
        json.dumps(mlp_to_dict(mlp, feature_scaling, variant_tag)) + "\n")


def load_mlp(path):
    return mlp_from_dict(json.loads(Path(path).read_text()))
