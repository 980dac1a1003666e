import math

import numpy as np
import pytest

from geo_exec.engine import ACTIONS, run_episodes_vectorized
from geo_exec.strategies import (
    ConstantPolicy,
    RandomPolicy,
    ScheduleBaseline,
    baseline_quantity,
    implied_action,
    make_policy,
    random_action,
)


def test_twap():
    assert baseline_quantity("twap", 390_000, 390, 0) == 1000.0


def test_vwap_split():
    q = [baseline_quantity("vwap", 100.0, 2, t, profile=np.array([1.0, 3.0])) for t in range(2)]
    assert q == pytest.approx([25.0, 75.0], abs=1e-9)


def test_vwap_sums_to_q0():
    prof = np.random.default_rng(0).uniform(10, 1000, 390)
    total = math.fsum(baseline_quantity("vwap", 12345.0, 390, t, profile=prof) for t in range(390))
    assert abs(total - 12345.0) <= 1.0
    assert total == pytest.approx(12345.0, rel=1e-12)


def test_pov():
    assert baseline_quantity("pov", 100.0, 10, 3, profile=np.full(10, 100.0), volume=50.0) == pytest.approx(5.0, abs=1e-9)


def test_zero_profile_falls_back_to_twap(caplog):
    assert baseline_quantity("vwap", 100.0, 4, 1, profile=np.zeros(4)) == 25.0
    assert "TWAP" in caplog.text


def test_baseline_errors():
    with pytest.raises(ValueError):
        baseline_quantity("twap", 100.0, 4, 4)
    with pytest.raises(ValueError):
        ScheduleBaseline("iceberg")


def test_random_action_replay_and_frequencies():
    a = [random_action(np.random.default_rng(5)) for _ in range(3)]
    b = [random_action(np.random.default_rng(5)) for _ in range(3)]
    assert a == b
    rng = np.random.default_rng(0)
    n = 100_000
    draws = np.array([random_action(rng) for _ in range(n)])
    p = 1 / 9
    sd = math.sqrt(n * p * (1 - p))
    for v in ACTIONS:
        assert abs(np.sum(draws == v) - n * p) <= 3 * sd
    assert abs(draws.mean()) < 3 * draws.std() / math.sqrt(n)


@pytest.mark.parametrize("name", ["twap", "vwap", "pov", "random"])
def test_baselines_complete(market, orders, name):
    res = run_episodes_vectorized(make_policy(name), orders, market)
    for r in res:
        assert r.error is None
        assert r.summary["completion"] == 1.0
        assert all(s.q >= 0 for s in r.steps)


def test_make_policy():
    assert isinstance(make_policy("TWAP"), ScheduleBaseline)
    assert isinstance(make_policy("random"), RandomPolicy)
    with pytest.raises(ValueError):
        make_policy("ppo")
    with pytest.raises(ValueError):
        make_policy("elite:0,0")
    with pytest.raises(ValueError):
        make_policy("momentum")


def test_constant_and_implied():
    assert ConstantPolicy(0.5).act(None, None) == 0.5
    assert implied_action(150.0, 100.0) == pytest.approx(0.5)
    assert math.isnan(implied_action(1.0, 0.0))
