import functools

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from convexreg.model import Dataset
from convexreg.synth import gen_instance, oracle_solve

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_dataset(N, n, seed=0, scale=2.0):
    rng = np.random.default_rng(seed)
    X = rng.normal(0.0, scale, size=(N, n))
    y = np.sum(X ** 2, axis=1) + rng.normal(0.0, 1.0, size=N)
    return Dataset(X, y)


@functools.lru_cache(maxsize=None)
def instance(kind, n, N, seed=0):
    return gen_instance(kind, n, N, seed)


@functools.lru_cache(maxsize=None)
def oracle(kind, n, N, seed, gamma, cap=200):
    ds, _ = instance(kind, n, N, seed)
    return oracle_solve(ds, gamma, cap=cap)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ----------------------------------------------------------------------------
# one PASS/FAIL line per acceptance criterion
# ----------------------------------------------------------------------------

_CRITERIA = {}


def _criterion(item):
    name = item.originalname if hasattr(item, "originalname") else item.name
    if not name.startswith("test_criterion_"):
        return None
    number = int(name.split("_")[2])
    doc = (item.function.__doc__ or name).strip().splitlines()[0]
    return number, doc


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    key = _criterion(item)
    if key is None or (report.when != "call" and report.passed):
        return
    number, title = key
    ok = report.passed and not getattr(report, "wasxfail", None)
    prev = _CRITERIA.get(number, (title, True))[1]
    _CRITERIA[number] = (title, prev and ok)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {title}")
