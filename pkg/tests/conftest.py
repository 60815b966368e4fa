import pytest

# criterion number -> (passed, detail), filled by tests marked ``acceptance``
ACCEPTANCE: dict[int, tuple[bool, str]] = {}
_DETAILS: dict[str, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): acceptance criterion n")


@pytest.fixture
def detail(request):
    """Callable that attaches a one-line detail to the current acceptance test."""
    def put(text: str) -> None:
        _DETAILS[request.node.nodeid] = text
    return put


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or rep.when == "teardown":
        return
    n = mark.args[0]
    if rep.when == "setup" and rep.passed:
        return
    text = _DETAILS.get(item.nodeid, "")
    if rep.failed:
        msg = str(rep.longrepr.reprcrash.message) if hasattr(rep.longrepr, "reprcrash") \
            else str(rep.longrepr)
        text = f"{text}; {msg.splitlines()[0]}" if text else msg.splitlines()[0]
    ok = rep.passed and ACCEPTANCE.get(n, (True, ""))[0]
    prev = ACCEPTANCE.get(n)
    if prev is not None and prev[1] and text != prev[1]:
        text = f"{prev[1]}; {text}"
    ACCEPTANCE[n] = (ok, text)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, text = ACCEPTANCE[n]
        terminalreporter.write_line(f"ACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} - {text}")
