import numpy as np
import pytest

ACCEPTANCE_RESULTS = []


def record_criterion(number, name, passed, detail=""):
    ACCEPTANCE_RESULTS.append((number, name, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: r[0]):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {number}: {name} {detail}".rstrip())


def numeric_grad(fn, arr, step=1e-3):
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    out = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn()
        flat[i] = orig - step
        down = fn()
        flat[i] = orig
        out.reshape(-1)[i] = (up - down) / (2 * step)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
