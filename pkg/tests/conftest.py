import numpy as np
import pytest


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at vector ``x``."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


# acceptance verdicts, printed once at the end of the session
VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(VERDICTS):
        terminalreporter.write_line(line)
