"""Autodiff engine: tensors, ops, layers, optimizer, kernels, grad checking."""

from . import functional, gradcheck, kernels, module, optim
from .tensor import Tensor, as_tensor

__all__ = ["Tensor", "as_tensor", "functional", "gradcheck", "kernels", "module", "optim"]
