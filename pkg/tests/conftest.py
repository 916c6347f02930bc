import threading

import pytest

from stub_server import StubBackendServer


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion in the summary."""
    lines = {}
    for status, flag in (("passed", "PASS"), ("failed", "FAIL"), ("error", "FAIL")):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py" in nodeid and getattr(rep, "when", "call") == "call":
                name = nodeid.split("::")[-1].removeprefix("test_")
                lines[name] = flag
    if lines:
        terminalreporter.write_sep("-", "acceptance criteria")
        for name, flag in lines.items():
            terminalreporter.write_line(f"[ACCEPTANCE] {name}: {flag}")


@pytest.fixture(scope="session")
def stub_backend():
    server = StubBackendServer()
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield server
    finally:
        server.shutdown()
        thread.join(timeout=5)
