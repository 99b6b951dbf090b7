"""Acceptance bookkeeping: one PASS/FAIL line per numbered criterion."""
import pytest

_outcomes: dict[int, list[tuple[str, bool]]] = {}
_titles: dict[int, str] = {}
_details: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")


@pytest.fixture
def note(request):
    """Attach a measured value to the criterion line of the running test."""
    marker = request.node.get_closest_marker("criterion")

    def add(text: str) -> None:
        if marker is not None:
            _details.setdefault(marker.args[0], []).append(text)
        print(text)

    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    _titles[n] = title
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        _outcomes.setdefault(n, []).append((item.name, rep.passed))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_outcomes):
        ok = all(passed for _, passed in _outcomes[n])
        failed = [name for name, passed in _outcomes[n] if not passed]
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {_titles[n]}"
        if _details.get(n):
            line += "  [" + "; ".join(_details[n]) + "]"
        if failed:
            line += "  failing: " + ", ".join(failed)
        tr.write_line(line)
