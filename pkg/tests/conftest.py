import re


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, with the measured values."""
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call":
                continue
            m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", rep.nodeid)
            if not m:
                continue
            detail = ", ".join(f"{k}={v}" for k, v in rep.user_properties)
            lines.append((int(m.group(1)), f"criterion {m.group(1)} {m.group(2)}: "
                          f"{'PASS' if outcome == 'passed' else 'FAIL'}"
                          + (f" ({detail})" if detail else "")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
