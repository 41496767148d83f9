"""Prints one PASS/FAIL line per acceptance check at the end of the run."""


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py" not in rep.nodeid or rep.when != "call":
                continue
            props = dict(rep.user_properties)
            lines.append((props.get("order", 99), f"{outcome.upper()[:4]:4} {props.get('label', rep.nodeid)}: {props.get('detail', '')}"))
    if lines:
        terminalreporter.section("acceptance")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
