import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

_ACCEPTANCE: dict[str, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(cid): acceptance criterion id, reported in the summary")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "measured")
    status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    _ACCEPTANCE[marker.args[0]] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_ACCEPTANCE, key=lambda c: int(c[1:])):
        status, detail = _ACCEPTANCE[cid]
        terminalreporter.write_line(f"{cid} {status}  {detail}")
