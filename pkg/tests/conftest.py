import numpy as np
import pytest

# criterion number -> {"title", "outcome", "seconds", "detail"}
_ACCEPTANCE: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def detail(request):
    """Per-criterion notes shown in the acceptance summary."""
    marker = request.node.get_closest_marker("criterion")
    notes: list[str] = []
    if marker is not None:
        _ACCEPTANCE.setdefault(marker.args[0], {"title": marker.args[1]})["notes"] = notes
    return notes.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    entry = _ACCEPTANCE.setdefault(marker.args[0], {"title": marker.args[1]})
    entry["outcome"] = "PASS" if rep.passed else "FAIL"
    entry["seconds"] = rep.duration


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        e = _ACCEPTANCE[n]
        notes = "; ".join(e.get("notes", []))
        line = f"criterion {n} [{e.get('outcome', 'NOT RUN')}] {e['title']} ({e.get('seconds', 0):.1f}s)"
        terminalreporter.write_line(line + (f": {notes}" if notes else ""))
