import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one acceptance criterion's outcome; failures are recorded and re-raised."""

    class Recorder:
        def __init__(self):
            self.number = None

        def __call__(self, number: int, title: str):
            self.number = number
            self.title = title
            self.details: list[str] = []
            return self

        def note(self, text: str):
            self.details.append(text)

        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            detail = "; ".join(self.details)
            if exc_type is None:
                status = "PASS"
            else:
                status = "FAIL"
                first = str(exc).splitlines()[0] if str(exc) else exc_type.__name__
                detail = f"{detail}; {first}" if detail else first
            ACCEPTANCE_LINES[self.number] = f"criterion {self.number:2d} {status}: {self.title}" + (
                f" ({detail})" if detail else ""
            )
            return False

    return Recorder()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
