import pytest

_RESULTS = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record a one-line verdict for an acceptance criterion.

    Usage: ``criterion(6, ok, "detail")`` right before the assertion; the
    verdicts are printed together at the end of the session.
    """
    results = request.config.stash.setdefault(_RESULTS, {})

    def record(number, ok: bool, detail: str) -> bool:
        results[str(number)] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    # "8a" sorts after "8" and before "10"
    for number in sorted(results, key=lambda k: (int(k.rstrip("abcdefgh")), k)):
        ok, detail = results[number]
        terminalreporter.write_line(f"criterion {number:>3}: {'PASS' if ok else 'FAIL'}  {detail}")
