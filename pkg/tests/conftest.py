import os
import re

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from trispace.synthgen import SynthConfig, generate

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_ACCEPTANCE: dict[str, str] = {}


@pytest.fixture(scope="session")
def small_trajs():
    """Sixty short labelled trajectories; fast enough for end-to-end tests."""
    return generate(SynthConfig(n_trajectories=60, length_mean=90.0, length_std=60.0, cap=300, seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    m = re.search(r"test_acceptance\.py::test_(a\d)_(\w+)", report.nodeid)
    if m:
        _ACCEPTANCE[m.group(1).upper()] = f"{'PASS' if report.passed else 'FAIL'}  {m.group(2)}"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=lambda k: int(k[1:])):
        terminalreporter.write_line(f"{key} {_ACCEPTANCE[key]}")
