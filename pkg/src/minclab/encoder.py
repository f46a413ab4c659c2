"""Small fully-connected embedding network with hand-written backprop.

Hidden layers use tanh; the output layer is affine, optionally followed by
``v / (||v|| + eps)``. Inputs may be a single vector or a batch of rows.
Gradients of a batch are summed over rows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

NORM_EPS = 1e-12


@dataclass
class GradientBuffer:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def zeros_like(cls, model: "EmbeddingModel") -> "GradientBuffer":
        return cls([np.zeros_like(w) for w in model.weights], [np.zeros_like(b) for b in model.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def scaled(self, c: float) -> "GradientBuffer":
        return GradientBuffer([c * w for w in self.weights], [c * b for b in self.biases])

    def __add__(self, other: "GradientBuffer") -> "GradientBuffer":
        return GradientBuffer(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat()))


@dataclass
class Tape:
    """Activations recorded by :meth:`EmbeddingModel.forward`."""

    inputs: list[np.ndarray]  # input to each layer
    pre_norm: np.ndarray  # output of the last affine layer
    single: bool
    sizes: tuple[int, ...]


@dataclass
class EmbeddingModel:
    sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    normalize_output: bool = True
    eps: float = NORM_EPS

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if len(self.weights) != len(self.sizes) - 1 or len(self.biases) != len(self.sizes) - 1:
            raise ValueError("parameter count inconsistent with layer sizes")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.sizes[k + 1], self.sizes[k]) or b.shape != (self.sizes[k + 1],):
                raise ValueError(f"layer {k} parameter shapes do not match sizes {self.sizes}")

    @classmethod
    def init(cls, sizes, seed: int, normalize_output: bool = True) -> "EmbeddingModel":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(tuple(sizes), weights, biases, normalize_output)

    @property
    def embedding_dim(self) -> int:
        return self.sizes[-1]

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(
            self.sizes,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.normalize_output,
            self.eps,
        )

    def flat_params(self) -> np.ndarray:
        return GradientBuffer(self.weights, self.biases).flat()

    def set_flat_params(self, theta: np.ndarray) -> None:
        pos = 0
        for w, b in zip(self.weights, self.biases):
            w[...] = theta[pos : pos + w.size].reshape(w.shape)
            pos += w.size
            b[...] = theta[pos : pos + b.size]
            pos += b.size

    def forward(self, x) -> tuple[np.ndarray, Tape]:
        return forward(self, x)

    def __call__(self, x) -> np.ndarray:
        return forward(self, x)[0]

    def penultimate(self, x) -> np.ndarray:
        """Activation feeding the output layer (the input itself for a linear model)."""
        return forward(self, x)[1].inputs[-1]

    def apply_update(self, step: GradientBuffer) -> None:
        for w, dw in zip(self.weights, step.weights):
            w += dw
        for b, db in zip(self.biases, step.biases):
            b += db


def forward(model: EmbeddingModel, x) -> tuple[np.ndarray, Tape]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = np.atleast_2d(x)
    if h.shape[1] != model.sizes[0]:
        raise ValueError(f"input dimension {h.shape[1]} does not match model input {model.sizes[0]}")
    inputs = []
    last = len(model.weights) - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        inputs.append(h)
        z = h @ w.T + b
        h = z if k == last else np.tanh(z)
    pre = h
    if model.normalize_output:
        out = pre / (np.linalg.norm(pre, axis=1, keepdims=True) + model.eps)
    else:
        out = pre
    tape = Tape(inputs, pre, single, model.sizes)
    return (out[0] if single else out), tape


def normalize_vjp(pre: np.ndarray, cot: np.ndarray, eps: float) -> np.ndarray:
    """Cotangent of ``v / (||v|| + eps)`` pulled back to ``v`` (row-wise)."""
    n = np.linalg.norm(pre, axis=1, keepdims=True)
    denom = n + eps
    radial = np.sum(pre * cot, axis=1, keepdims=True)
    safe_n = np.where(n > 0, n, 1.0)
    return cot / denom - pre * radial / (safe_n * denom**2)


def backward(model: EmbeddingModel, tape: Tape, output_cotangent) -> GradientBuffer:
    """Gradient of ``sum_rows <cotangent, embedding>`` with respect to all parameters."""
    if tape.sizes != model.sizes:
        raise ValueError("tape was recorded by a model with a different architecture")
    g = np.atleast_2d(np.asarray(output_cotangent, dtype=np.float64))
    if g.shape != tape.pre_norm.shape:
        raise ValueError(f"cotangent shape {g.shape} does not match embeddings {tape.pre_norm.shape}")
    if model.normalize_output:
        g = normalize_vjp(tape.pre_norm, g, model.eps)
    n_layers = len(model.weights)
    gw = [None] * n_layers
    gb = [None] * n_layers
    for k in range(n_layers - 1, -1, -1):
        h_in = tape.inputs[k]
        gw[k] = g.T @ h_in
        gb[k] = g.sum(axis=0)
        if k > 0:
            g = (g @ model.weights[k]) * (1.0 - h_in**2)
    return GradientBuffer(gw, gb)


def ema_blend(target: EmbeddingModel, online: EmbeddingModel, gamma: float) -> EmbeddingModel:
    """Return ``gamma * target + (1 - gamma) * online`` parameter-wise."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    if target.sizes != online.sizes or target.normalize_output != online.normalize_output:
        raise ValueError("target and online architectures differ")
    out = target.copy()
    for w, wo in zip(out.weights, online.weights):
        w *= gamma
        w += (1.0 - gamma) * wo
    for b, bo in zip(out.biases, online.biases):
        b *= gamma
        b += (1.0 - gamma) * bo
    return out


def finite_difference_grad(fn, model: EmbeddingModel, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn(model)`` over every flat parameter."""
    theta = model.flat_params()
    probe = model.copy()
    grad = np.empty_like(theta)
    for i in range(theta.size):
        t = theta.copy()
        t[i] += step
        probe.set_flat_params(t)
        hi = fn(probe)
        t[i] -= 2 * step
        probe.set_flat_params(t)
        lo = fn(probe)
        grad[i] = (hi - lo) / (2 * step)
    return grad


def max_relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Elementwise |a - n| / max(|a|, |n|, floor), maximized."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom, initial=0.0))


def model_to_dict(model: EmbeddingModel) -> dict:
    return {
        "format": "minclab-checkpoint/1",
        "sizes": list(model.sizes),
        "normalize_output": model.normalize_output,
        "eps": model.eps,
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
    }


def model_from_dict(doc: dict) -> EmbeddingModel:
    return EmbeddingModel(
        tuple(doc["sizes"]),
        [np.array(w, dtype=np.float64).reshape(o, i) for w, o, i in zip(doc["weights"], doc["sizes"][1:], doc["sizes"][:-1])],
        [np.array(b, dtype=np.float64) for b in doc["biases"]],
        bool(doc["normalize_output"]),
        float(doc.get("eps", NORM_EPS)),
    )


def save_checkpoint(path, model: EmbeddingModel) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)) + "\n")


def load_checkpoint(path) -> EmbeddingModel:
    return model_from_dict(json.loads(Path(path).read_text()))
