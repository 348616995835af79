import numpy as np
import pytest

# criterion number -> [title, passed, detail]
_CRITERIA: dict = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def note(request):
    """Record a measured value shown next to the test's acceptance verdict."""
    def add(text: str) -> None:
        request.node.user_properties.append(("note", text))
    return add


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            item.user_properties.append(("criterion", m.args[0]))
            item.user_properties.append(("title", m.args[1]))


def pytest_runtest_logreport(report):
    props = report.user_properties
    number = dict(props).get("criterion")
    if number is None:
        return
    entry = _CRITERIA.setdefault(number, [dict(props)["title"], True, ""])
    notes = "; ".join(v for k, v in props if k == "note")
    if notes:
        entry[2] = notes
    if report.failed:
        entry[1] = False
        crash = getattr(report.longrepr, "reprcrash", None)
        msg = crash.message if crash is not None else str(report.longrepr)
        entry[2] = msg.splitlines()[0] if msg else entry[2]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[number]
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
