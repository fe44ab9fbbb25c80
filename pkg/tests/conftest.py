import pytest

_VERDICTS = {}


@pytest.fixture
def verdict(request):
    """Record one acceptance criterion's outcome for the terminal summary.

    Call ``verdict(n, detail)`` just before the test's final assertions; a
    failing test flips the recorded line to FAIL.
    """
    state = {}

    def record(n, detail):
        state["n"] = n
        _VERDICTS.setdefault(n, {})[request.node.nodeid] = [True, detail]

    yield record
    rep = getattr(request.node, "rep_call", None)
    if "n" in state and (rep is None or not rep.passed):
        _VERDICTS[state["n"]][request.node.nodeid][0] = False


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        parts = _VERDICTS[n].values()
        ok = all(p for p, _ in parts)
        detail = "; ".join(d for _, d in parts)
        terminalreporter.write_line(f"ACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {detail}")
