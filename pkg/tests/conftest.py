import zlib

import numpy as np
import pytest

from handgcat.tensor import checked, precision


@pytest.fixture(autouse=True)
def _checked_float64(request):
    """Tests run with NaN/Inf detection on and in 64-bit unless marked otherwise."""
    if request.node.get_closest_marker("float32"):
        with checked():
            yield
        return
    with checked(), precision("float64"):
        yield


@pytest.fixture
def rng(request):
    return np.random.default_rng(zlib.crc32(request.node.nodeid.encode()))


def pytest_configure(config):
    config.addinivalue_line("markers", "float32: run in the default 32-bit training precision")
    config.addinivalue_line("markers", "slow: multi-minute training runs")
    config.addinivalue_line("markers", "acceptance(n, title): acceptance criterion n, reported in the summary")


_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, title = mark.args
    if rep.failed or (rep.when == "call"):
        status = "PASS" if rep.passed else "FAIL"
        detail = "" if rep.passed else str(rep.longrepr).strip().splitlines()[-1][:160]
        _ACCEPTANCE[n] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        status, title, detail = _ACCEPTANCE[n]
        line = f"criterion {n}: {status}  {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
