"""Central finite-difference oracle for reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..errors import NumericError
from .params import ParamStore
from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str | None
    per_param: dict[str, float] = field(default_factory=dict)

    def failing(self, tol: float) -> list[str]:
        return [n for n, e in self.per_param.items() if e >= tol]


def _scalar(loss: Tensor) -> float:
    value = float(np.asarray(loss.data).reshape(-1)[0])
    if not np.isfinite(value):
        raise NumericError("grad_check: loss is not finite")
    return value


def grad_check_report(f: Callable[[ParamStore], Tensor], params: ParamStore, eps: float = 1e-6,
                      names: list[str] | None = None) -> GradCheckReport:
    """Compare backward() against central differences for every parameter scalar.

    Relative error uses ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    names = names if names is not None else params.names()
    params.zero_grad()
    loss = f(params)
    _scalar(loss)
    loss.backward()
    analytic = {n: (params[n].grad if params[n].grad is not None
                    else np.zeros_like(params[n].data)) for n in names}

    per_param: dict[str, float] = {}
    with no_grad():
        for n in names:
            p = params[n]
            flat = p.data.reshape(-1)
            numeric = np.empty_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = _scalar(f(params))
                flat[i] = orig - eps
                down = _scalar(f(params))
                flat[i] = orig
                numeric[i] = (up - down) / (2.0 * eps)
            a = analytic[n].reshape(-1)
            denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
            per_param[n] = float(np.max(np.abs(a - numeric) / denom)) if flat.size else 0.0
    params.zero_grad()
    worst = max(per_param, key=per_param.get) if per_param else None
    return GradCheckReport(per_param[worst] if worst else 0.0, worst, per_param)


def grad_check(f: Callable[[ParamStore], Tensor], params: ParamStore, eps: float = 1e-6) -> float:
    """Worst relative error between analytic and central-difference gradients."""
    return grad_check_report(f, params, eps).max_rel_error
