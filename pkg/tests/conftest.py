import numpy as np
import pytest


def rel_err(a, b, floor=1e-6):
    """Elementwise relative error, measured against ``floor`` when both values are tiny.

    Central differences with step 1e-5 resolve gradients only to about 1e-11,
    so exact zeros need an absolute yardstick.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    den = np.maximum(np.abs(a), np.abs(b))
    return np.abs(a - b) / np.maximum(den, floor)


def numeric_grad(f, x, idx, h=1e-5):
    """Central difference of scalar ``f()`` w.r.t. ``x.flat[idx]`` (x mutated in place, then restored)."""
    flat = x.reshape(-1)
    old = flat[idx]
    flat[idx] = old + h
    up = f()
    flat[idx] = old - h
    down = f()
    flat[idx] = old
    return (up - down) / (2 * h)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ------------------------------------------------- acceptance criterion log
#
# Tests marked ``criterion(n)`` feed one PASS/FAIL line per criterion into the
# terminal summary; a criterion passes only if every test under it passed.

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): test belongs to acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    entry = _CRITERIA.setdefault(mark.args[0], {"ok": True, "notes": [], "title": mark.kwargs.get("title", "")})
    entry["ok"] &= not rep.failed
    entry["notes"] += [v for k, v in item.user_properties if k == "detail" and v not in entry["notes"]]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        line = f"criterion {n:2d} {'PASS' if e['ok'] else 'FAIL'}  {e['title']}"
        if e["notes"]:
            line += "  [" + "; ".join(e["notes"]) + "]"
        terminalreporter.write_line(line)
