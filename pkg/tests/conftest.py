"""Shared hooks: acceptance outcomes are echoed in the terminal summary."""

ACCEPTANCE_LINES: list[str] = []


def record(criterion: int, passed: bool, detail: str, soft: bool = False) -> str:
    status = "PASS" if passed else ("FAIL (soft, not gated)" if soft else "FAIL")
    line = f"criterion {criterion}: {status} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
