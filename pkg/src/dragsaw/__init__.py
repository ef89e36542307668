"""Patch-dragsaw contrastive regularization and uncertainty-gated
feature selection for encoder-decoder segmentation, on a small float64
autodiff engine."""

from .errors import ConfigError, ContractError
from .tensor import Tensor, backward, grad_check, no_grad

__all__ = ["ConfigError", "ContractError", "Tensor", "backward", "grad_check", "no_grad"]
