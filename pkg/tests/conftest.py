import numpy as np
import pytest

from idreveal.generator import GenConfig
from idreveal.tid_net import TidConfig

# small widths keep the unit tests fast; the layer structure is unchanged
SMALL_TID = TidConfig(hidden_channels=16, out_channels=8, groupnorm_groups=4)
SMALL_GEN = GenConfig(hidden_channels=16, groupnorm_groups=4)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
