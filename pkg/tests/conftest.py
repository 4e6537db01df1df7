import numpy as np
import pytest

from mggnet.tensor import Tape, Tensor, backward


def fd_check(build, inputs, h=1e-5, floor=1e-8):
    """Max relative error between tape gradients and central differences.

    ``build(*tensors)`` returns a scalar Tensor; every input is perturbed.
    """
    for t in inputs:
        t.grad = None
    with Tape():
        backward(build(*inputs))
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            with Tape():
                fp = float(build(*inputs).data)
            flat[k] = orig - h
            with Tape():
                fm = float(build(*inputs).data)
            flat[k] = orig
            num = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[k]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return worst


def leaf(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list = []


def record_criterion(number, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
