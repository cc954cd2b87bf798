import numpy as np
import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(gen, h, w, c=3):
    return gen.random((h, w, c))


def record_criterion(number: int, description: str, passed: bool, detail: str = ""):
    """Log one acceptance line; assert afterwards so FAIL lines still appear."""
    status = "PASS" if passed else "FAIL"
    line = f"criterion {number:2d} [{status}] {description}"
    if detail:
        line += f"  ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert passed, line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
