import numpy as np
import pytest
from threadpoolctl import threadpool_limits

# deterministic single-threaded BLAS/FFT for every test
_limits = threadpool_limits(1)

_ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    """Store one acceptance line; printed in the terminal summary."""
    _ACCEPTANCE[criterion] = f"criterion {criterion:2d}: {'PASS' if passed else 'FAIL'} - {detail}"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[k])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
