import numpy as np
import pytest

from pasdet import scenes


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_scene():
    return scenes.generate_scene(n_boxes=2, n_classes=3, n_views=4, seed=7, resolution=(32, 32))


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record one ``criterion N: PASS|FAIL`` line and fail the test on FAIL."""
    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
