from collections import OrderedDict

import pytest

# criterion id -> (description, [outcomes])
_ACCEPTANCE = OrderedDict()


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(cid, text): test belongs to an acceptance criterion")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("acceptance")
        if mark is not None:
            cid, text = mark.args
            _ACCEPTANCE.setdefault(cid, (text, []))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _ACCEPTANCE[mark.args[0]][1].append(rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid, (text, results) in _ACCEPTANCE.items():
        if not results:
            status = "NOT RUN"
        else:
            status = "PASS" if all(results) else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {cid}: {text} ({sum(results)}/{len(results)} checks)")
