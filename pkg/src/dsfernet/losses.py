"""Hybrid training objective: weighted BCE on the final map plus dice on deep maps."""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .tensor import Tensor, as_tensor

BCE_EPS = 1e-7
DICE_EPS = 1e-6


def _label_array(label) -> np.ndarray:
    y = label.data if isinstance(label, Tensor) else np.asarray(label, dtype=np.float64)
    if not np.all((y == 0) | (y == 1)):
        raise ConfigError("label values must be 0 or 1")
    return y


def changed_probability(logits: Tensor) -> Tensor:
    """Softmax over the class axis, changed-class channel; ``[n,2,h,w] -> [n,h,w]``."""
    axis = logits.ndim - 3
    return ops.take(ops.softmax(logits, axis=axis), 1, axis=axis)


def weighted_bce(pred_prob: Tensor, label, w0: float = 1.0, w1: float = 1.0, eps: float = BCE_EPS) -> Tensor:
    """Class-weighted binary cross-entropy averaged over all pixels.

    Predictions are clamped to ``[eps, 1 - eps]`` before the logs.
    """
    y = _label_array(label)
    if y.shape != pred_prob.shape:
        raise ShapeError(f"prediction {pred_prob.shape} and label {y.shape} differ")
    p = ops.clamp(as_tensor(pred_prob), eps, 1.0 - eps)
    term = ops.add(ops.mul(w1 * y, ops.log(p)), ops.mul(w0 * (1.0 - y), ops.log(ops.sub(1.0, p))))
    return ops.mul(ops.mean(term), -1.0)


def dice_loss(pred_prob: Tensor, label, epsilon: float = DICE_EPS) -> Tensor:
    """``1 - (2 sum(Y P) + eps) / (sum(Y) + sum(P) + eps)`` over every pixel given."""
    y = _label_array(label)
    pred_prob = as_tensor(pred_prob)
    if y.shape != pred_prob.shape:
        raise ShapeError(f"prediction {pred_prob.shape} and label {y.shape} differ")
    inter = ops.sum(ops.mul(pred_prob, y))
    num = ops.add(ops.mul(inter, 2.0), epsilon)
    den = ops.add(ops.sum(pred_prob), float(y.sum()) + epsilon)
    return ops.sub(1.0, ops.div(num, den))


def downsample_label(label: np.ndarray, stage: int) -> np.ndarray:
    """Max-pool a binary label by ``2**(stage-1)`` so any changed pixel marks its cell."""
    if stage not in (4, 5):
        raise ConfigError(f"deep supervision only exists for stages 4 and 5, got {stage}")
    factor = 2 ** (stage - 1)
    y = np.asarray(label)
    h, w = y.shape[-2:]
    if h % factor or w % factor:
        raise ShapeError(f"label {h}x{w} not divisible by {factor}")
    lead = y.shape[:-2]
    blocks = y.reshape(lead + (h // factor, factor, w // factor, factor))
    return blocks.max(axis=(-3, -1))


def total_loss(wbce, dice4, dice5, lam: float):
    """``wbce + lam * (dice4 + dice5) / 2``; accepts tensors or floats."""
    if isinstance(wbce, Tensor) or isinstance(dice4, Tensor) or isinstance(dice5, Tensor):
        deep = ops.mul(ops.add(dice4, dice5), 0.5)
        return ops.add(wbce, ops.mul(deep, lam))
    return wbce + lam * ((dice4 + dice5) * 0.5)


def class_weights(labels) -> tuple[float, float]:
    """``(w0, w1)`` = (changed fraction, unchanged fraction) over the given labels."""
    changed = 0.0
    total = 0
    for y in labels:
        y = np.asarray(y)
        changed += float(y.sum())
        total += y.size
    if total == 0:
        raise ConfigError("cannot derive class weights from an empty label set")
    frac = changed / total
    if frac in (0.0, 1.0):
        return 1.0, 1.0
    return frac, 1.0 - frac
