import numpy as np
import pytest
from hypothesis import settings

from prednet.core import PredNetConfig

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Three layers on 16x16 frames: fast enough for per-test training loops."""
    return PredNetConfig(num_layers=3, a_channels=(1, 2, 4), r_channels=(2, 4, 4), input_size=(16, 16))


CRITERIA = pytest.StashKey[list]()
DETAIL = pytest.StashKey[str]()


def pytest_configure(config):
    config.stash[CRITERIA] = []
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported as one PASS/FAIL line")
    config.addinivalue_line("markers", "slow: trains full-size models (tens of minutes each)")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.skipped:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        detail = item.stash.get(DETAIL, "")
        line = f"{'PASS' if report.passed else 'FAIL'} {marker.args[0]}" + (f": {detail}" if detail else "")
        item.config.stash[CRITERIA].append(line)
        print(f"\n{line}")


@pytest.fixture
def detail(request):
    """Attach a one-line measurement summary to the criterion's PASS/FAIL line."""

    def note(text: str) -> None:
        request.node.stash[DETAIL] = text

    return note


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash[CRITERIA]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
