import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_VERDICTS = {}


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line per acceptance criterion.

    Call ``verdict(number, ok, detail)``; a test that errors before recording
    is reported as FAIL.
    """
    key = request.node.nodeid

    def record(number, ok, detail):
        _VERDICTS[key] = (number, bool(ok), detail)
        print(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")

    yield record
    if key not in _VERDICTS:
        number = getattr(request.node.function, "criterion", "?")
        _VERDICTS[key] = (number, False, "error before a verdict was recorded")


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(_VERDICTS.values(), key=lambda v: (str(v[0]).zfill(3))):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
