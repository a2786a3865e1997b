"""Collects one PASS/FAIL line per acceptance criterion and prints them at the end."""

CRITERIA = {}


def record(number, ok, detail):
    CRITERIA[number] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        ok, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
