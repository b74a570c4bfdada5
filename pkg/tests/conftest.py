import numpy as np
import pytest


def central_diff(f, x, h=1e-6):
    """Central differences of a scalar or vector function; rows index the input."""
    x = np.asarray(x, dtype=float)
    rows = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        rows.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.array(rows)


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(1e-8, float(np.max(np.abs(b)))))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = {}


def record_criterion(number, passed, detail):
    """Store the pass/fail line for an acceptance criterion (printed in the terminal summary)."""
    tag = "PASS" if passed else "FAIL"
    ACCEPTANCE_LINES.setdefault(number, []).append(f"criterion {number:>2} {tag}  {detail}")
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        for line in ACCEPTANCE_LINES[number]:
            terminalreporter.write_line(line)
