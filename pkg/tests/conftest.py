import numpy as np
import pytest

from lfrclab import tensor as T

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE = {}


def record(number, passed, detail):
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def check_grad(f, inputs):
    """Worst relative error between autodiff and central differences.

    ``f`` maps a list of Tensors to a scalar Tensor; every input gets checked.
    """
    leaves = [T.Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    grads = T.grad(f(leaves), leaves)
    worst = 0.0
    for i, x in enumerate(inputs):
        def fi(t, i=i):
            args = [T.Tensor(np.array(v, dtype=np.float64)) for v in inputs]
            args[i] = t
            return f(args)
        fd = T.finite_difference_grad(fi, np.array(x, dtype=np.float64))
        worst = max(worst, rel_err(grads[i], fd))
    return worst


@pytest.fixture(autouse=True)
def _restore_default_dtype():
    old = T.default_dtype()
    yield
    T.set_default_dtype(old)
