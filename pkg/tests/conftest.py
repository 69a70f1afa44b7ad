import numpy as np
import pytest

from flowrefine.tensor import default_dtype


@pytest.fixture(autouse=True)
def float64_mode():
    """Verification runs in 64-bit; tests needing 32-bit switch explicitly."""
    with default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def away_from_zero(rng, shape, lo=0.1, hi=1.0):
    """Random values with |x| in [lo, hi] so kinks at 0 stay out of FD reach."""
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, hi, size=shape)


def subpixel_coords(rng, shape, size, margin=0.05):
    """Coordinates inside (0, size-1) that stay ``margin`` away from integers."""
    whole = rng.integers(0, size - 1, size=shape)
    return whole + rng.uniform(margin, 1 - margin, size=shape)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdicts after the run, one line per criterion."""
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[key])
