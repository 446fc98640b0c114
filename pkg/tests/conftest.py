import numpy as np
import pytest

from admkd.data import synth_blobs
from admkd.nn import ModelSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_specs():
    """A teacher/student pair with different widths and equal spatial taps."""
    teacher = ModelSpec("teacher", [6, 8], 1, (1, 8, 8), 3)
    student = ModelSpec("student", [4, 5], 1, (1, 8, 8), 3)
    return teacher, student


@pytest.fixture
def small_blobs():
    train = synth_blobs(3, 8, (1, 8, 8), 0.1, seed=0)
    test = synth_blobs(3, 4, (1, 8, 8), 0.1, seed=1, split="test")
    return train, test



def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        rep.criterion = marker.args
        rep.criterion_report = dict(item.user_properties).get("report")


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, plus any attached report."""
    results = {}
    for reports in terminalreporter.stats.values():
        for rep in reports:
            args = getattr(rep, "criterion", None)
            if args is None:
                continue
            if rep.when == "call" or rep.failed:
                number, title = args
                prev = results.get(number)
                failed = rep.failed or (prev is not None and prev[0] == "FAIL")
                results[number] = ("FAIL" if failed else "PASS", title, rep.criterion_report or (prev and prev[2]))
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        status, title, report = results[number]
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {title}")
        for extra in (report or "").splitlines():
            terminalreporter.write_line("    " + extra)
