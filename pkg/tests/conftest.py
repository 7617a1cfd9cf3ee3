import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tensor_memory.autodiff import ops
from tensor_memory.autodiff.gradcheck import grad_check_report
from tensor_memory.autodiff.params import ParamStore

settings.register_profile("desk", max_examples=25, deadline=None, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("desk")


def primitive_grad_error(fn, arrays, seed=0, eps=1e-6):
    """Worst relative FD error of ``sum(fn(*inputs) * R)`` over every input."""
    params = ParamStore()
    for i, a in enumerate(arrays):
        params.add(f"in{i}", a)
    names = params.names()
    probe = {}

    def loss(p):
        out = fn(*(p[n] for n in names))
        if "R" not in probe:
            probe["R"] = np.random.default_rng(seed).normal(size=out.shape)
        return ops.sum(ops.mul(out, probe["R"]))

    return grad_check_report(loss, params, eps=eps)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
