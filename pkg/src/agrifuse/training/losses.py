"""Training losses."""

from __future__ import annotations

import numpy as np

from agrifuse.autodiff import ops
from agrifuse.autodiff.tensor import Tensor, as_tensor, check_same_shape
from agrifuse.errors import ContractError


def rmse_loss(pred, target) -> Tensor:
    """sqrt(mean((pred - target)^2)); the gradient is zero where the loss is zero."""
    pred, target = as_tensor(pred), as_tensor(target)
    check_same_shape(pred, target, "rmse_loss")
    diff = pred.data - target.data
    value = np.sqrt(np.mean(diff * diff))

    def backward(g):
        if value == 0.0:
            zero = np.zeros_like(diff)
            return zero, zero
        gp = g * diff / (diff.size * value)
        return gp, -gp

    return Tensor._from_op(np.asarray(value), (pred, target), backward, "rmse")


def cross_entropy(logits, labels) -> Tensor:
    """Mean of -log softmax(logits)[label] over the leading axes.

    ``logits`` is [..., 2] and ``labels`` holds class ids shaped like the
    leading axes (a scalar label for a single [2] logit vector).
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != logits.shape[:-1]:
        raise ContractError(f"labels {labels.shape} do not match logits {logits.shape}")
    if np.any((labels < 0) | (labels >= logits.shape[-1])):
        raise ContractError(f"labels must lie in [0, {logits.shape[-1]})")
    logp = ops.log_softmax(logits, axis=-1)
    onehot = np.eye(logits.shape[-1])[labels]
    return -(logp * onehot).sum() / max(labels.size, 1)
