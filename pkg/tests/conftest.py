from __future__ import annotations

import sys
import threading
from pathlib import Path

import pytest

FIXTURES = Path(__file__).resolve().parent / "fixtures"
sys.path.insert(0, str(FIXTURES))

from build_fixtures import make_records, random_record, respond  # noqa: E402

from masca.backend import ScriptedBackend  # noqa: E402
from masca.dataset import load_schema  # noqa: E402


class RecordingBackend(ScriptedBackend):
    """Scripted backend that logs every request in arrival order."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.requests = []
        self._lock = threading.Lock()

    def send(self, request):
        with self._lock:
            self.requests.append(request)
        return super().send(request)


@pytest.fixture(scope="session")
def schema():
    return load_schema()


@pytest.fixture
def records10():
    return make_records()


@pytest.fixture
def recording():
    return RecordingBackend(responder=respond)


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


ACCEPTANCE_RESULTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[n])


__all__ = ["ACCEPTANCE_RESULTS", "FIXTURES", "RecordingBackend", "make_records", "random_record", "respond"]
