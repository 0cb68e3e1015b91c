"""Adam with bias correction."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from agrifuse.autodiff.tensor import Tensor
from agrifuse.errors import ContractError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    def copy(self) -> "AdamState":
        return copy.deepcopy(self)


def adam_step(params: Sequence[Tensor], state: AdamState, lr: float = None) -> None:
    """Update ``params`` in place from their ``.grad``; advances ``state.step``.

    ``lr`` overrides ``state.lr`` for this step (used by schedules).
    """
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ContractError(f"optimizer state tracks {len(state.m)} tensors, got {len(params)}")
    for n, p in enumerate(params):
        if p.grad is None:
            raise ContractError(f"parameter {n} {p.shape} has no gradient; call backward() first")
        if p.grad.shape != p.data.shape:
            raise ContractError(f"gradient shape {p.grad.shape} does not match parameter {p.data.shape}")
    lr = state.lr if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
