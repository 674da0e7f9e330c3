"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""


def pytest_terminal_summary(terminalreporter):
    results = {}
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(report, "user_properties", ()))
            if "criterion" not in props:
                continue
            entry = results.setdefault(report.nodeid, {"ok": True, "duration": 0.0})
            entry.update(props)
            entry["ok"] &= outcome == "passed"
            entry["duration"] += report.duration
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for entry in sorted(results.values(), key=lambda e: e["criterion"][0]):
        number, title = entry["criterion"]
        status = "PASS" if entry["ok"] else "FAIL"
        line = f"{status} criterion {number:>2}: {title} [{entry['duration']:.2f}s]"
        if entry.get("detail"):
            line += f" {entry['detail']}"
        terminalreporter.write_line(line)
