"""Multi-task objective: reconstruction (MAE + MSE) and segmentation (CE + Dice) terms."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    absolute,
    add,
    log,
    mul,
    power,
    reduce_mean,
    reduce_sum,
    scale,
    softmax,
    sub,
)

CE_WEIGHT = 0.4
CE_EPS = 1e-12
DICE_EPS = 1e-6


@dataclass
class LossBundle:
    loss_a: Tensor
    loss_s: Tensor
    loss_b: Tensor
    loss_c: Tensor
    total: Tensor

    def values(self) -> dict:
        return {name: getattr(self, name).item() for name in ("loss_a", "loss_s", "loss_b", "loss_c", "total")}


def _same_shape(pred: Tensor, target: Tensor) -> None:
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")


def mae(pred: Tensor, target: Tensor) -> Tensor:
    _same_shape(pred, target)
    return reduce_mean(absolute(sub(pred, target)))


def mse(pred: Tensor, target: Tensor) -> Tensor:
    _same_shape(pred, target)
    d = sub(pred, target)
    return reduce_mean(mul(d, d))


def _check_onehot(scores: Tensor, target: Tensor) -> None:
    if scores.ndim != 4:
        raise ShapeError(f"scores must be [N,K,H,W], got {scores.shape}")
    if scores.shape != target.shape:
        raise ShapeError(f"scores {scores.shape} and target {target.shape} differ")
    if not np.allclose(target.data.sum(axis=1), 1.0, atol=1e-9):
        raise ValueError("target is not one-hot: class axis does not sum to 1")


def weighted_ce(scores: Tensor, target: Tensor) -> Tensor:
    """Unweighted pixel-mean cross-entropy of softmax(scores) against a one-hot target.

    The 0.4 weight is applied by :func:`seg_loss`.
    """
    _check_onehot(scores, target)
    n, k, h, w = scores.shape
    logp = log(softmax(scores, axis=1), eps=CE_EPS)
    return scale(reduce_sum(mul(target, logp)), -1.0 / (n * h * w))


def dice_loss(scores: Tensor, target: Tensor) -> Tensor:
    """``K - sum_k (2 sum p_k t_k + eps) / (sum p_k + sum t_k + eps)`` with ``p = softmax(scores)``."""
    _check_onehot(scores, target)
    k = scores.shape[1]
    p = softmax(scores, axis=1)
    inter = reduce_sum(mul(p, target), axes=(0, 2, 3))
    num = add(scale(inter, 2.0), Tensor(np.full(k, DICE_EPS)))
    den = add(reduce_sum(p, axes=(0, 2, 3)), Tensor(target.data.sum(axis=(0, 2, 3)) + DICE_EPS))
    dice = mul(num, power(den, -1))
    return sub(Tensor([float(k)]), reduce_sum(dice))


def seg_loss(scores: Tensor, target: Tensor) -> Tensor:
    return weighted_ce(scores, target) * CE_WEIGHT + dice_loss(scores, target)


def total_loss(outputs, x_curr: Tensor, label: Tensor) -> LossBundle:
    """Combine all four terms for one batch.

    Args:
        outputs: :class:`~eaanet.model.EAAOutputs` of the batch.
        x_curr: target slices ``[N,1,H,W]`` in [0, 1].
        label: one-hot labels ``[N,K,H,W]``.
    """
    a = mae(outputs.recon, x_curr)
    s = mse(outputs.recon, x_curr)
    b = seg_loss(outputs.seg_basic, label)
    c = seg_loss(outputs.seg_complete, label)
    return LossBundle(a, s, b, c, a + s + b + c)


def check_finite(bundle: LossBundle) -> None:
    for name, value in bundle.values().items():
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite {name} = {value}")
