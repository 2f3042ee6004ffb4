import pytest

_LINES: dict[int, str] = {}


class Criterion:
    def __init__(self):
        self.number = None
        self.title = ""

    def verdict(self, number: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        _LINES[number] = line
        print(line)
        assert ok, line


@pytest.fixture
def criterion(request):
    rec = Criterion()
    yield rec
    # a test that raised before reaching its verdict still gets a line
    marker = request.node.get_closest_marker("criterion")
    if marker is not None and marker.args[0] not in _LINES:
        _LINES[marker.args[0]] = f"criterion {marker.args[0]:>2} FAIL  {marker.args[1]}  [error before verdict]"


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_LINES):
            terminalreporter.write_line(_LINES[n])
