import pytest

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    n, title = mark.args
    c = _criteria.setdefault(n, {"title": title, "ok": True, "detail": ""})
    if rep.failed:
        c["ok"] = False
        c["detail"] = c["detail"] or rep.longreprtext.strip().splitlines()[-1][:120]
    else:
        c["detail"] = c["detail"] or getattr(item, "criterion_detail", "")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_criteria):
        c = _criteria[n]
        tr.write_line(f"[{'PASS' if c['ok'] else 'FAIL'}] {n:>2}. {c['title']}"
                      + (f"  ({c['detail']})" if c["detail"] else ""))
    passed = sum(c["ok"] for c in _criteria.values())
    tr.write_line(f"{passed}/{len(_criteria)} criteria met")
