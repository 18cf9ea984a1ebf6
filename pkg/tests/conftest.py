from __future__ import annotations

import os
import socket

import pytest

# Set by the offline acceptance check: any attempt to open a network connection fails the test.
NO_NETWORK = os.environ.get("NO_NETWORK") == "1"


def _refuse(*args, **kwargs):
    raise RuntimeError("network access attempted during an offline test run")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): an acceptance criterion, reported as PASS/FAIL")
    config._criteria = {}
    if NO_NETWORK:
        socket.socket.connect = _refuse
        socket.socket.connect_ex = _refuse
        socket.create_connection = _refuse
        socket.getaddrinfo = _refuse


@pytest.fixture(autouse=True)
def _isolated_env(monkeypatch, tmp_path):
    """Keep ABDUCTOR_* settings from the developer's shell out of the tests."""
    for name in list(os.environ):
        if name.startswith("ABDUCTOR_"):
            monkeypatch.delenv(name)
    monkeypatch.setenv("XDG_CACHE_HOME", str(tmp_path / "xdg-cache"))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    results = item.config._criteria
    passed = results.get(number, (title, True))[1]
    if report.failed or (report.when == "call" and report.skipped):
        passed = False
    results[number] = (title, passed)


def pytest_terminal_summary(terminalreporter, config):
    results = config._criteria
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, passed = results[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {number}: {title}")
