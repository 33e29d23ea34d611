"""Shared test plumbing.

The acceptance tests in test_acceptance.py register a verdict per criterion;
the terminal-summary hook prints them as one line each at the end of the run,
so the outcome of every criterion is visible even when pytest captures stdout.
"""

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def record_acceptance(num: int, title: str, ok: bool, detail: str = ""):
    ACCEPTANCE[num] = (title, bool(ok), detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[num]
        line = f"criterion {num:2d} [{'PASS' if ok else 'FAIL'}] {title}"
        if detail:
            line += f" -- {detail}"
        terminalreporter.write_line(line)
