import pytest

_acceptance: list[tuple[str, str]] = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        if hasattr(report, "wasxfail"):
            outcome = "soft-fail (xfail)" if report.outcome == "skipped" else report.outcome
        else:
            outcome = report.outcome
        _acceptance.append((name, outcome))
    elif report.when == "setup" and report.skipped and "test_acceptance" in report.nodeid:
        _acceptance.append((report.nodeid.split("::")[-1], "skipped"))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name, outcome in _acceptance:
        label = {"passed": "PASS", "failed": "FAIL"}.get(outcome, outcome.upper())
        terminalreporter.write_line(f"{label}: {name}")


@pytest.fixture(scope="session")
def repo_root():
    from pathlib import Path

    return Path(__file__).resolve().parent.parent
