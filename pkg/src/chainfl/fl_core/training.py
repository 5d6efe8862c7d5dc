"""Client training, aggregation and evaluation.

FedAvg and FedProx share the aggregator and differ only in the local
objective, which is

    cross-entropy + weight_decay/2 * |w|^2
                  + mu/2 * |w - w_global|^2        (fedprox only)
                  + lambda * hinge(E @ w[slice])  (when a watermark context is given)

minimized by plain mini-batch SGD.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .. import watermark as wm
from .data import Dataset
from .models import ModelParams, ShapeMismatch, loss_and_grad, logits, log_softmax


class NonFiniteLoss(FloatingPointError):
    pass


class EmptyUpdateSet(ValueError):
    pass


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    loss: float


@dataclass(frozen=True)
class ModelUpdate:
    params: ModelParams
    accuracy: float
    loss: float
    dataset_size: int


@dataclass(frozen=True)
class WatermarkContext:
    key: wm.WatermarkKey
    bits: np.ndarray
    offset: int
    gamma: float = wm.DEFAULT_GAMMA
    lam: float = wm.DEFAULT_LAMBDA

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.offset + self.key.d)


def to_micro(x: float) -> int:
    """Fixed-point micro-units, rounded half-to-even on the exact binary value."""
    if not math.isfinite(x):
        raise NonFiniteLoss(f"cannot record non-finite metric {x!r}")
    # round() on a Fraction is exact and half-to-even, with no precision cap
    return round(Fraction(x) * 1_000_000)


def evaluate(params: ModelParams, data: Dataset) -> Metrics:
    z = logits(params, data.X)
    if data.y.max(initial=0) >= z.shape[1]:
        raise ShapeMismatch("labels exceed the model's output classes")
    logp = log_softmax(z)
    n = len(data.y)
    loss = float(-np.mean(logp[np.arange(n), data.y]))
    accuracy = float(np.mean(np.argmax(z, axis=1) == data.y))
    return Metrics(accuracy, loss)


def objective(params: ModelParams, X, y, train_args, algorithm: str,
              global_values: np.ndarray | None = None,
              watermark_ctx: WatermarkContext | None = None) -> tuple[float, np.ndarray]:
    loss, grad = loss_and_grad(params, X, y)
    w = params.values
    if train_args.weight_decay:
        loss += 0.5 * train_args.weight_decay * float(w @ w)
        grad = grad + train_args.weight_decay * w
    if algorithm == "fedprox" and train_args.mu > 0:
        diff = w - global_values
        loss += 0.5 * train_args.mu * float(diff @ diff)
        grad = grad + train_args.mu * diff
    if watermark_ctx is not None:
        sl = watermark_ctx.slice
        h_loss, h_grad = wm.regularizer(w[sl], watermark_ctx.key, watermark_ctx.bits,
                                        watermark_ctx.gamma)
        loss += watermark_ctx.lam * h_loss
        grad = grad.copy()
        grad[sl] += watermark_ctx.lam * h_grad
    return loss, grad


def local_train(global_params: ModelParams, data: Dataset, train_args, algorithm: str = "fedavg",
                seed: int = 0, watermark_ctx: WatermarkContext | None = None,
                label: str = "client") -> ModelUpdate:
    """Run ``local_epochs`` of seeded mini-batch SGD from the global model."""
    if len(data) == 0:
        raise ValueError(f"{label}: empty partition")
    if not np.all(np.isfinite(global_params.values)):
        raise NonFiniteLoss(f"{label}: global parameters are not finite")
    rng = np.random.default_rng(seed)
    params = global_params
    g0 = global_params.values
    n = len(data)
    bs = min(train_args.batch_size, n)
    lr = train_args.learning_rate
    for epoch in range(train_args.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            # overflow is reported below as NonFiniteLoss, not as a numpy warning
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grad = objective(params, data.X[idx], data.y[idx], train_args, algorithm,
                                       g0, watermark_ctx)
                values = params.values - lr * grad
            if not (math.isfinite(loss) and np.all(np.isfinite(values))):
                raise NonFiniteLoss(
                    f"{label}: loss {loss!r} at epoch {epoch}, batch offset {start}; "
                    f"lr={lr} may be too large")
            params = params.with_values(values)
    m = evaluate(params, data)
    return ModelUpdate(params, m.accuracy, m.loss, n)


def aggregate(updates: list[ModelUpdate]) -> ModelParams:
    """Dataset-size weighted mean of the update parameters.

    Each coordinate is summed with ``math.fsum`` so the result does not depend
    on the order of ``updates``.
    """
    if not updates:
        raise EmptyUpdateSet("no updates to aggregate")
    shapes = updates[0].params.shapes
    for u in updates[1:]:
        if u.params.shapes != shapes:
            raise ShapeMismatch("updates disagree on parameter shapes")
    if len(updates) == 1:
        # (n * v) / n can be off by an ulp; the mean of one update is the update
        return updates[0].params.with_values(updates[0].params.values.copy())
    total = sum(u.dataset_size for u in updates)
    weighted = np.stack([u.dataset_size * u.params.values for u in updates])
    summed = np.array([math.fsum(col) for col in weighted.T])
    return ModelParams(summed / total, shapes)
