import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from coforge import ModelConfig, build_model  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """SmallCNN small enough for exhaustive gradient checks."""
    return ModelConfig(arch="SmallCNN", widths=[4, 6], num_classes=5, input_shape=[3, 8, 8])


@pytest.fixture
def tiny_model(tiny_config):
    return build_model(tiny_config, seed=7)


@pytest.fixture
def small_model():
    cfg = ModelConfig(arch="SmallCNN", widths=[8, 16], num_classes=10, input_shape=[3, 32, 32])
    return build_model(cfg, seed=3)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict = {}


@pytest.fixture
def acceptance():
    def record(number: int, name: str, status: str, detail: str) -> str:
        line = f"criterion {number:>2} [{name}]: {status} - {detail}"
        ACCEPTANCE_LINES[number] = line
        return line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
