import numpy as np
import pytest

from tude.evaluation import NoiseModel, add_noise
from tude.synth import make_shape, normalize_scale


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@pytest.fixture
def noisy_sphere():
    clean = normalize_scale(make_shape("sphere", 600))
    return clean, add_noise(clean, NoiseModel(0.05, 7))


# acceptance criteria report: one line per criterion at the end of the run
_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (report.when != "call" and report.passed):
        return
    number, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    prev = _criteria.get(number)
    if prev is None or prev[1] == "PASS":
        _criteria[number] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status, detail = _criteria[number]
        line = f"criterion {number:2d} {status}: {title}"
        terminalreporter.write_line(f"{line} ({detail})" if detail else line)
