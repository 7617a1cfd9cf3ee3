"""Minimal reverse-mode autodiff over numpy arrays."""
from . import ops
from .gradcheck import GradCheckReport, grad_check, grad_check_report
from .ops import depthwise_conv3d, elementwise, matmul, pointwise_conv3d
from .params import ParamStore, child_rng, xavier_uniform
from .tensor import (DEFAULT_DTYPE, Graph, Node, Tensor, as_tensor, finite_checks,
                     is_grad_enabled, no_grad, record)

__all__ = [
    "DEFAULT_DTYPE", "GradCheckReport", "Graph", "Node", "ParamStore", "Tensor", "as_tensor",
    "child_rng", "depthwise_conv3d", "elementwise", "finite_checks", "grad_check",
    "grad_check_report", "is_grad_enabled", "matmul", "no_grad", "ops", "pointwise_conv3d",
    "record", "xavier_uniform",
]
