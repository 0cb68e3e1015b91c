"""Minimal dense-tensor engine with reverse-mode differentiation."""

from agrifuse.autodiff import ops
from agrifuse.autodiff.serialize import load_array, load_tensor, save_tensor
from agrifuse.autodiff.tensor import Tensor, as_tensor, grad_enabled, no_grad

__all__ = ["Tensor", "as_tensor", "no_grad", "grad_enabled", "ops", "save_tensor", "load_tensor", "load_array"]
