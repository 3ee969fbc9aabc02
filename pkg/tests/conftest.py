import pytest

ACCEPTANCE_RESULTS = {}


@pytest.fixture
def record():
    """Store a pass/fail verdict plus the measured values for the final report."""
    def _record(key, ok, **measured):
        detail = ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                           for k, v in measured.items())
        line = f"{key}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_RESULTS[key] = line
        print(line)
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=lambda k: int(k[2:].split("_")[0])):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[key])
