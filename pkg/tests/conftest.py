import numpy as np
import pytest

from itigen.core import AttributeSet, AttributeSpec, HardPhrase
from itigen.synthetic import make_world


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def world22():
    return make_world((2, 2), names=["eyeglasses", "smiling"], seed=0)


@pytest.fixture
def faces_schema():
    gender = AttributeSpec("gender", ("female", "male"), 3, {
        "female": HardPhrase(substitute=("person", "woman")),
        "male": HardPhrase(substitute=("person", "man"))})
    glasses = AttributeSpec("eyeglasses", ("no", "yes"), 3, {
        "no": HardPhrase(append="without eyeglasses", negative="eyeglasses"),
        "yes": HardPhrase(append="eyeglasses")})
    return AttributeSet([gender, glasses])


# one PASS/FAIL/SKIP line per acceptance criterion, printed after the run
_lines: list[str] = []


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("criterion")
        if marker is not None:
            item.user_properties.append(("criterion", marker.args[0]))


def pytest_runtest_logreport(report):
    if "test_acceptance" not in report.nodeid:
        return
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.when == "setup" and report.skipped):
        status = "PASS" if report.passed else "SKIP" if report.skipped else "FAIL"
        line = f"{status}  criterion {props['criterion']}"
        if props.get("detail"):
            line += f"  [{props['detail']}]"
        _lines.append(line)


def pytest_terminal_summary(terminalreporter):
    if _lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _lines:
            terminalreporter.write_line(line)
