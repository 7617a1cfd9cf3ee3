"""Gradient-check probe for the full memory scan.

The probe is the smallest complete configuration: one sequence of four
tokens scanned in two chunks of two through a 4-channel memory on a 4³
grid.  It starts from a random memory state and reads out a fixed random
projection of the fused tokens.  A zero start state would leave the
step-two read seeing only a single write's Gaussian tail, making many
gradient entries so small that central differences cannot resolve them.
"""
from __future__ import annotations

from .autodiff import ops
from .autodiff.gradcheck import GradCheckReport, grad_check_report
from .autodiff.params import ParamStore, child_rng
from .autodiff.tensor import Tensor
from .memory import MemoryConfig, MemoryState, TensorMemory

PROBE_EPS = 1e-4


def scan_probe(seed: int = 0, input_scale: float = 0.3):
    """(loss_fn, params, memory) for the full-scan gradient check."""
    rng = child_rng(seed, "gradcheck/probe")
    cfg = MemoryConfig(channels=4, grid=(4, 4, 4), chunk_size=2, d_model=8)
    params = ParamStore()
    memory = TensorMemory(cfg, params, "mem.", seed=seed)
    x = Tensor(rng.normal(size=(1, 4, 8)) * input_scale)
    h0 = rng.normal(size=(1, 4, 4, 4, 4)) * 0.5
    c0 = rng.normal(size=(1, 4, 4, 4, 4)) * 0.5
    probe = rng.normal(size=(1, 4, 8))

    def loss(_params=None):
        out, _, _ = memory.scan(x, MemoryState(Tensor(h0), Tensor(c0)))
        return ops.sum(ops.mul(out, probe))

    return loss, params, memory


def run_scan_gradcheck(seed: int = 0, eps: float = PROBE_EPS) -> GradCheckReport:
    loss, params, _ = scan_probe(seed)
    return grad_check_report(loss, params, eps=eps)


def group_errors(report: GradCheckReport) -> dict[str, float]:
    """Worst relative error per parameter group (name without the module prefix)."""
    groups: dict[str, float] = {}
    for name, err in report.per_param.items():
        key = name.split(".")[-1]
        groups[key] = max(groups.get(key, 0.0), err)
    return dict(sorted(groups.items()))


__all__ = ["PROBE_EPS", "group_errors", "run_scan_gradcheck", "scan_probe"]
