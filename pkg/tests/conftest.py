import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("ci", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_model():
    from dcae.model import DcaeModel, profile_config

    return DcaeModel(profile_config("tiny"), seed=7)


@pytest.fixture(scope="session")
def small_image():
    return np.random.default_rng(5).integers(0, 256, size=(75, 100, 3), dtype=np.uint8)


VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[VERDICTS] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request, capsys):
    """Print and record one PASS/FAIL line, then fail the test if the criterion failed."""

    def emit(number, title, ok, detail=""):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}"
        if detail:
            line += f"  [{detail}]"
        with capsys.disabled():
            print(f"\n{line}")
        request.config.stash[VERDICTS].append(line)
        assert ok, line

    return emit
