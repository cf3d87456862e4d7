import re

import pytest


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def criterion(request):
    """Recorder for one acceptance criterion: ``criterion(ok, detail)`` prints and returns ok."""
    m = re.search(r"criterion_(\d+)", request.node.name)
    number = int(m.group(1)) if m else 0
    lines = request.config._acceptance_lines
    seen = []

    def record(ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        seen.append(line)
        lines.append(line)
        print(line)
        return ok

    yield record
    if not seen:
        lines.append(f"criterion {number:2d}: FAIL  no verdict, the run raised before finishing")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
