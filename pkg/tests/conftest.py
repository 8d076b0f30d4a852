import pytest


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    """Expose call-phase failures to fixtures (acceptance verdict lines)."""
    out = yield
    rep = out.get_result()
    if rep.when == "call" and rep.failed:
        item.rep_call_failed = True
