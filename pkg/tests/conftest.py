import sys


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance lines so they appear in plain ``pytest -v`` output."""
    module = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])
