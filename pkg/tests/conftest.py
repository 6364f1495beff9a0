import numpy as np
import pytest

from influprune.dataset import SplitSpec, build_sequences, generate_synthetic
from influprune.toy import convex_toy


@pytest.fixture(scope="session")
def toy():
    return convex_toy(seed=0)


@pytest.fixture(scope="session")
def small_data():
    log = generate_synthetic(200, 50, 0.1, 0.5, seed=3)
    return build_sequences(log, SplitSpec(rating_threshold=None))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one pass/fail line per acceptance criterion at the end of the run
_CRITERIA = {}


def pytest_runtest_logreport(report):
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if not name.startswith("test_criterion_"):
        return
    detail = dict(report.user_properties).get("detail", "")
    _CRITERIA[name] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda s: int(s.split("_")[2])):
        status, detail = _CRITERIA[name]
        first, *rest = detail.splitlines() or [""]
        terminalreporter.write_line(f"{status}  {name}  {first}")
        for line in rest:
            terminalreporter.write_line(f"      {line}")
