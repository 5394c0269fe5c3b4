import re

# filled by test_acceptance; one line per criterion
ACCEPTANCE_LINES: list[str] = []


def _order(line: str):
    m = re.search(r"criterion (\d+)(\w?)", line)
    return (int(m.group(1)), m.group(2)) if m else (99, "")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=_order):
            terminalreporter.write_line(line)
