import numpy as np
import pytest

from geo_exec.impact import CalibrationEntry, ImpactParams
from geo_exec.marketdata import MarketData, SynthConfig, synth_generate
from geo_exec.orders import OrderGenConfig, generate_orders

IMPACT = ImpactParams(g0=5e-4, tau=6.0, form="sqrt")


@pytest.fixture(scope="session")
def impact():
    return IMPACT


@pytest.fixture(scope="session")
def market():
    raw = synth_generate(SynthConfig(n_symbols=3, n_days=25, daily_vol_range=(0.002, 0.004), seed=11))
    return MarketData.from_raw(raw)


@pytest.fixture(scope="session")
def store(market):
    return {s: CalibrationEntry(s, IMPACT, True) for s in market.symbols}


@pytest.fixture(scope="session")
def orders(market, store):
    dates = market.all_dates()
    cfg = OrderGenConfig(60, dates[1], dates[-1], horizon_range=(5, 60), seed=5)
    return generate_orders(cfg, market, store)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# one PASS/FAIL line per acceptance criterion

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        n = mark.args[0]
        _CRITERIA[n] = _CRITERIA.get(n, True) and not (rep.failed or rep.skipped)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if _CRITERIA[n] else 'FAIL'}")
