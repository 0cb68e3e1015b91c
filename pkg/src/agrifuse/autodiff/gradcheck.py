"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Dict, Optional, Sequence

import numpy as np

from agrifuse.autodiff.tensor import Tensor, no_grad


def numerical_grad(
    fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5, indices: Optional[Sequence[tuple]] = None
) -> np.ndarray:
    """d fn() / d param by central differences, at all or the given flat ``indices``."""
    flat = param.data.reshape(-1)
    picks = range(flat.size) if indices is None else indices
    grad = np.zeros(flat.size)
    with no_grad():
        for i in picks:
            orig = flat[i]
            flat[i] = orig + h
            plus = fn().item()
            flat[i] = orig - h
            minus = fn().item()
            flat[i] = orig
            grad[i] = (plus - minus) / (2.0 * h)
    return grad.reshape(param.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error, max(|a|,|n|) in the denominator."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(
    fn: Callable[[], Tensor],
    params: Dict[str, Tensor],
    h: float = 1e-5,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> Dict[str, float]:
    """Relative error of analytic vs numeric gradient for every tensor in ``params``.

    With ``max_entries`` set, only a random subset of coordinates per tensor is
    probed (the analytic gradient is restricted to the same subset).
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.zero_grad()
    fn().backward()
    errors = {}
    for name, p in params.items():
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        if max_entries is not None and p.size > max_entries:
            picks = rng.choice(p.size, size=max_entries, replace=False)
        else:
            picks = np.arange(p.size)
        numeric = numerical_grad(fn, p, h=h, indices=picks).reshape(-1)[picks]
        errors[name] = relative_error(analytic.reshape(-1)[picks], numeric)
    return errors
