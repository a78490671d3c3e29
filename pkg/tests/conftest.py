import contextlib

import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def criterion(request):
    """``with criterion(n, title) as notes:`` records one PASS/FAIL line.

    ``notes`` is a dict whose items are appended to the line.
    """
    lines = request.config.stash[_LINES]

    @contextlib.contextmanager
    def record(number, title):
        notes = {}
        try:
            yield notes
        except BaseException as exc:
            detail = f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
            lines.append(f"FAIL criterion {number}: {title} ({detail})")
            print(lines[-1])
            raise
        extra = ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in notes.items())
        lines.append(f"PASS criterion {number}: {title}" + (f" ({extra})" if extra else ""))
        print(lines[-1])

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
