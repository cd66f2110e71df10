from __future__ import annotations

import functools

import pytest

from p2pmarket.casefile import bundled, bundled_cases
from p2pmarket.runner import RunSettings, clear_case

BUNDLED = sorted(bundled_cases())

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, text = mark.args
    if rep.failed:
        _criteria[n] = ("FAIL", text)
    elif rep.when == "call" and n not in _criteria:
        _criteria[n] = ("PASS", text)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        status, text = _criteria[n]
        terminalreporter.write_line(f"[{status}] criterion {n:2d}: {text}")


@functools.lru_cache(maxsize=None)
def cleared(name: str, **overrides):
    """Cached clearing of a bundled case; keyword overrides patch the run settings."""
    case = bundled(name)
    settings = RunSettings.from_case(case)
    for k, v in overrides.items():
        setattr(settings, k, v)
    return case, clear_case(case, settings)


@pytest.fixture(scope="session")
def clear_bundled():
    return cleared
