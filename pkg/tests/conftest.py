from __future__ import annotations

import pytest

VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[VERDICTS] = []


@pytest.fixture(scope="session")
def verdicts(request):
    """Collects one ``PASS``/``FAIL`` line per acceptance criterion for the terminal summary."""
    return request.config.stash[VERDICTS]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
