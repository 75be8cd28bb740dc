import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from tensorforge.tensor import cpu_engine  # noqa: E402

import oracles  # noqa: E402


@pytest.fixture
def eg():
    e = cpu_engine()
    yield e
    e.close()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def f32(a):
    return np.asarray(a, dtype=np.float32)


def unit_gradcheck(eg, unit, xs, oracle_fn, param_names=(), rng=None, h=1e-6):
    """Compare a unit's forward and backward against a float64 oracle.

    ``oracle_fn(*inputs, *params)`` must be a float64 forward. Returns
    (forward_err, [grad errs for inputs..., params...]).
    """
    rng = rng or np.random.default_rng(0)
    xs = [f32(x) for x in xs]
    ts = [eg.tensor(x) for x in xs]
    y = unit.forward(*ts)[0]
    params = [unit._params[n].numpy().astype(np.float64) for n in param_names]
    ref = oracle_fn(*xs, *params)
    fwd_err = oracles.max_rel_err(y.numpy(), ref)
    r = f32(rng.standard_normal(y.shape))
    dxs = unit.backward(eg.tensor(r))
    ana = [d.numpy() for d in dxs] + [unit._params[n].grad.numpy() for n in param_names]
    num = oracles.numeric_grad(lambda *a: float((oracle_fn(*a) * r).sum()), list(xs) + params, h)
    errs = [oracles.max_rel_err(a, b) for a, b in zip(ana, num)]
    unit.gc()
    for t in ts:
        t.delete()
    return fwd_err, errs


# -- acceptance reporting: one PASS/FAIL line per numbered criterion -------------------------

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None or (rep.when != "call" and not rep.failed):
        return
    n, title = m.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "tests": 0, "why": ""})
    if rep.when == "call":
        entry["tests"] += 1
    if rep.failed:
        entry["ok"] = False
        if not entry["why"]:
            msg = str(rep.longrepr.reprcrash.message) if hasattr(rep.longrepr, "reprcrash") \
                else str(rep.longrepr)
            entry["why"] = msg.splitlines()[0][:160]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["ok"] and e["tests"] else "FAIL"
        line = f"criterion {n:2d} {status}  {e['title']}"
        if status == "FAIL" and e["why"]:
            line += f"  -- {e['why']}"
        terminalreporter.write_line(line)
