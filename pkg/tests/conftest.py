"""Shared pytest plumbing: collects acceptance-criterion verdict lines and
prints them in the terminal summary so each run shows one line per criterion."""

_criterion_lines = []


def record_criterion(line: str) -> None:
    _criterion_lines.append(line)


def pytest_terminal_summary(terminalreporter):
    if _criterion_lines:
        terminalreporter.section("acceptance criteria")
        for line in _criterion_lines:
            terminalreporter.write_line(line)
