import os
from pathlib import Path

import pytest

DATA = Path(__file__).resolve().parents[1] / "src" / "versekit" / "data"
SCENARIOS = DATA / "scenarios"
LOGIC = DATA / "logic"
NEGATIVE = DATA / "negative"

ACCEPTANCE: dict[int, str] = {}


def seed() -> int:
    return int(os.environ.get("VERSEKIT_SEED", "0"))


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(seed())


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
