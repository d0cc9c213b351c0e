import pytest

RESULTS = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance gate (slow)")


@pytest.fixture(scope="session")
def verdict():
    """Record one PASS/FAIL line for the acceptance summary, then assert."""

    def record(index, name, ok, detail):
        line = f"{index:02d} {'PASS' if ok else 'FAIL'} {name}: {detail}"
        RESULTS.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if RESULTS:
        terminalreporter.section("acceptance")
        for line in sorted(RESULTS):
            terminalreporter.write_line(line)
