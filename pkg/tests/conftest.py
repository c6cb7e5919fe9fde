"""Collects one summary line per acceptance criterion and prints them at the end of the run."""

ACCEPTANCE: dict[int, str] = {}
EXPECTED: list[int] = []


def record(number: int, passed: bool, detail: str, soft: bool = False) -> None:
    status = "PASS" if passed else ("SOFT-FAIL" if soft else "FAIL")
    ACCEPTANCE[number] = f"criterion {number:2d}: {status:9s} {detail}"


def pytest_terminal_summary(terminalreporter):
    if not EXPECTED:
        return
    terminalreporter.section("acceptance criteria")
    for n in EXPECTED:
        terminalreporter.write_line(ACCEPTANCE.get(n, f"criterion {n:2d}: FAIL      no result recorded"))
