import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    # Print the acceptance scorecard after capture is released so the
    # per-criterion lines show up in any capture mode.
    for mod in sys.modules.values():
        board = getattr(mod, "SCOREBOARD", None)
        if not board:
            continue
        terminalreporter.section("acceptance criteria")
        for num, name, ok in sorted(board):
            verdict = "PASS" if ok else "FAIL"
            terminalreporter.write_line(f"criterion {num:02d} {name}: {verdict}")
