"""Shared test plumbing: acceptance criteria get one summary line each."""

_ACCEPTANCE: list[tuple[int, str, str, str]] = []


def record_acceptance(number: int, name: str, passed: bool | None, detail: str = "") -> None:
    """Record a criterion outcome; passed=None means skipped."""
    status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
    _ACCEPTANCE.append((number, name, status, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, status, detail in sorted(_ACCEPTANCE):
        line = f"ACCEPTANCE {number} [{status}] {name}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)
