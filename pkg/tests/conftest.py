import pytest

_RESULTS: list[str] = []


@pytest.fixture
def record():
    """Call ``record(label, ok, detail)`` once per acceptance criterion."""

    def _record(label: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {label}" + (f"  [{detail}]" if detail else "")
        _RESULTS.append(line)
        print(line)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in _RESULTS:
            terminalreporter.write_line(line)
