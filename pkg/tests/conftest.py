import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("sansaw", deadline=None, max_examples=40)
settings.load_profile("sansaw")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, filled in by test_acceptance.py
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1].rstrip("."))):
            terminalreporter.write_line(line)
