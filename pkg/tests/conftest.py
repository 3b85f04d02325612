import contextlib

import pytest

_RESULTS = {}


class _Checks:
    def __init__(self):
        self.details = []
        self.failed = []

    def check(self, ok, detail):
        self.details.append(detail)
        if not ok:
            self.failed.append(detail)


@pytest.fixture(scope="session")
def criterion():
    """Context manager recording one PASS/FAIL line per acceptance criterion."""

    @contextlib.contextmanager
    def record(number, title):
        checks = _Checks()
        try:
            yield checks
        except Exception as exc:
            checks.failed.append(f"{type(exc).__name__}: {exc}")
            raise
        finally:
            ok = not checks.failed
            shown = checks.failed if checks.failed else checks.details
            _RESULTS[number] = (ok, title, "; ".join(shown))
        assert not checks.failed, "; ".join(checks.failed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        ok, title, detail = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}: {title} | {detail}")
