"""Flat-parameter classifiers with hand-written gradients.

Two architectures, both ending in a dense softmax layer:

* ``linear``      logits = X W + b
* ``mlp_1hidden`` logits = tanh(X W1 + b1) W2 + b2

Weights are stored (in, out) row-major, each followed by its bias.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class UnknownModel(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ModelParams:
    values: np.ndarray
    shapes: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self):
        total = sum(int(np.prod(s)) for _, s in self.shapes)
        if total != len(self.values):
            raise ShapeMismatch(f"shape table covers {total} values, vector has {len(self.values)}")

    def with_values(self, values: np.ndarray) -> "ModelParams":
        return ModelParams(np.asarray(values, dtype=np.float64), self.shapes)

    def offsets(self) -> dict[str, tuple[int, tuple[int, ...]]]:
        out, pos = {}, 0
        for name, shape in self.shapes:
            out[name] = (pos, shape)
            pos += int(np.prod(shape))
        return out

    def layers(self) -> dict[str, np.ndarray]:
        return {name: self.values[o:o + int(np.prod(s))].reshape(s)
                for name, (o, s) in self.offsets().items()}

    @property
    def architecture(self) -> str:
        names = [n for n, _ in self.shapes]
        if names == ["fc.weight", "fc.bias"]:
            return "linear"
        if names == ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"]:
            return "mlp_1hidden"
        raise UnknownModel(f"unrecognized layer layout {names}")

    def final_layer_offset(self) -> int:
        """Start of the last dense layer's weight matrix in the flat vector."""
        weights = [n for n, _ in self.shapes if n.endswith(".weight")]
        return self.offsets()[weights[-1]][0]


def model_shapes(model_name: str, n_features: int, n_classes: int, hidden_units: int = 256):
    if model_name == "linear":
        return (("fc.weight", (n_features, n_classes)), ("fc.bias", (n_classes,)))
    if model_name == "mlp_1hidden":
        return (("fc1.weight", (n_features, hidden_units)), ("fc1.bias", (hidden_units,)),
                ("fc2.weight", (hidden_units, n_classes)), ("fc2.bias", (n_classes,)))
    raise UnknownModel(f"unknown model {model_name!r}; choose linear or mlp_1hidden")


def init_model(model_name: str, seed: int, n_features: int, n_classes: int,
               hidden_units: int = 256) -> ModelParams:
    """Uniform init in [-0.1, 0.1], deterministic per (name, seed, dims)."""
    shapes = model_shapes(model_name, n_features, n_classes, hidden_units)
    n = sum(int(np.prod(s)) for _, s in shapes)
    rng = np.random.default_rng([seed, 11])
    return ModelParams(rng.uniform(-0.1, 0.1, size=n), shapes)


def _forward(params: ModelParams, X: np.ndarray):
    L = params.layers()
    if params.architecture == "linear":
        w, b = L["fc.weight"], L["fc.bias"]
        if X.shape[1] != w.shape[0]:
            raise ShapeMismatch(f"data has {X.shape[1]} features, model expects {w.shape[0]}")
        return X @ w + b, None
    w1, b1, w2, b2 = L["fc1.weight"], L["fc1.bias"], L["fc2.weight"], L["fc2.bias"]
    if X.shape[1] != w1.shape[0]:
        raise ShapeMismatch(f"data has {X.shape[1]} features, model expects {w1.shape[0]}")
    h = np.tanh(X @ w1 + b1)
    return h @ w2 + b2, h


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def logits(params: ModelParams, X) -> np.ndarray:
    return _forward(params, np.asarray(X, dtype=np.float64))[0]


def cross_entropy(params: ModelParams, X, y) -> float:
    logp = log_softmax(logits(params, X))
    return float(-np.mean(logp[np.arange(len(y)), y]))


def loss_and_grad(params: ModelParams, X, y) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over (X, y) and its gradient w.r.t. the flat vector."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    z, h = _forward(params, X)
    logp = log_softmax(z)
    n = len(y)
    loss = float(-np.mean(logp[np.arange(n), y]))
    dz = np.exp(logp)
    dz[np.arange(n), y] -= 1.0
    dz /= n
    if h is None:
        parts = [X.T @ dz, dz.sum(axis=0)]
    else:
        w2 = params.layers()["fc2.weight"]
        dh = (dz @ w2.T) * (1.0 - h * h)
        parts = [X.T @ dh, dh.sum(axis=0), h.T @ dz, dz.sum(axis=0)]
    return loss, np.concatenate([p.ravel() for p in parts])
