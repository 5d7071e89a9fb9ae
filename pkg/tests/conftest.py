import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from facepipe import fixtures  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def detector():
    return fixtures.make_detector(320)


@pytest.fixture(scope="session")
def embedder():
    return fixtures.make_embedder()


@pytest.fixture(scope="session")
def embedder_i8(embedder):
    return fixtures.calibrated_embedder(embedder)


ACCEPTANCE_LINES = []


def record_acceptance(name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
