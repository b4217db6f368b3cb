"""Collects the acceptance verdicts and repeats them at the end of the run."""

VERDICTS = []


def record_verdict(number, title, ok, detail):
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    VERDICTS.append((number, line))
    print(line, flush=True)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(VERDICTS):
        terminalreporter.write_line(line)
