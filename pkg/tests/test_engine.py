import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geo_exec.engine import (
    ACTIONS,
    OBS_DIM,
    EpisodeData,
    EpisodeDoneError,
    EpisodeResult,
    EpisodeSetupError,
    ExecutionEnv,
    RewardWeights,
    compute_reward,
    reset,
    run_episode,
    run_episodes_vectorized,
    step,
    target_rate,
)
from geo_exec.impact import ImpactParams
from geo_exec.orders import Order
from geo_exec.strategies import ConstantPolicy, RandomPolicy, ScheduleBaseline

ZERO = ImpactParams(g0=0.0, tau=5.0)


def make_order(h=10, q0=1000.0, side=1, impact=ZERO, oid="X1"):
    return Order(oid, "SYM", "20220103", 0, h, q0, side, 5.0, 1.0, impact)


def make_data(h=10, mid=None, vwap=None, volume=None, profile=None, sigma=0.0):
    mid = np.full(h, 100.0) if mid is None else np.asarray(mid, dtype=float)
    vwap = mid.copy() if vwap is None else np.asarray(vwap, dtype=float)
    volume = np.full(h, 1000.0) if volume is None else np.asarray(volume, dtype=float)
    profile = volume.copy() if profile is None else np.asarray(profile, dtype=float)
    return EpisodeData(mid=mid, vwap=vwap, volume=volume, profile=profile, sigma_1=sigma, sigma_5=sigma, p0=float(mid[0]))


def play(order, data, actions=None, quantities=None, weights=None):
    state, obs = reset(order, data=data, weights=weights)
    k = 0
    while not state.done:
        if actions is not None:
            state, obs, r, done, info = step(state, action=actions[k % len(actions)])
        else:
            state, obs, r, done, info = step(state, quantity=quantities[k % len(quantities)])
        k += 1
    return state


# ---------------------------------------------------------------------------
# reset and observation


def test_reset_initial_state():
    data = make_data(mid=np.linspace(100, 101, 10))
    state, obs = reset(make_order(), data=data)
    assert obs.shape == (OBS_DIM,)
    assert state.q_rem == 1000.0
    assert obs[3] == 1000.0
    assert obs[9] == 0.0
    assert state.p0 == 100.0 and obs[10] == 100.0
    assert obs[6] == 100.0 and obs[7] == 0.0
    _, again = reset(make_order(), data=data)
    assert np.array_equal(obs, again)


def test_reset_p0_is_start_minute_mid(market, orders):
    o = orders[0]
    state, _ = reset(o, market=market)
    assert state.p0 == market.series(o.symbol, o.date).mid_price[o.start_minute]


def test_reset_missing_data(market, orders):
    import dataclasses

    bad = dataclasses.replace(orders[0], symbol="NOPE")
    with pytest.raises(EpisodeSetupError):
        reset(bad, market=market)


def test_fill_shows_in_observation():
    data = make_data(vwap=np.full(10, 100.05))
    state, _ = reset(make_order(), data=data)
    state, obs, *_ = step(state, quantity=100.0)
    assert obs[7] == 100.0
    assert obs[6] == pytest.approx(100.05, abs=1e-12)


def test_cumulative_impact_in_bps():
    imp = ImpactParams(g0=1e-3, tau=5.0)
    state, _ = reset(make_order(impact=imp), data=make_data())
    state, obs, *_ = step(state, action=0.0)
    assert obs[9] == pytest.approx(state.impact_state.accumulator * 1e4, rel=1e-15)
    assert obs[9] > 0


# ---------------------------------------------------------------------------
# target rate and step


def test_target_rate_ratio():
    data = make_data(h=5, profile=[1000.0] * 5)
    state, _ = reset(make_order(h=5, q0=500.0), data=data)
    assert target_rate(state) == pytest.approx(0.1)
    state.executed = 500.0
    assert target_rate(state) == 0.0


def test_scaffold_quantity_and_pause():
    imp = ImpactParams(g0=1e-3, tau=5.0)
    data = make_data(h=20, profile=[1000.0] * 20)
    state, _ = reset(make_order(h=20, q0=2000.0, impact=imp), data=data)
    state, *_ = step(state, action=0.0)
    assert state.steps[-1].q == pytest.approx(100.0)  # rho 0.1 at V=1000
    acc = state.impact_state.accumulator
    n_fills = len(state.fills)
    state, *_ = step(state, action=-1.0)
    assert state.steps[-1].q == 0.0
    assert len(state.fills) == n_fills
    assert state.impact_state.accumulator == pytest.approx(acc * math.exp(-1 / 5), rel=1e-15)


def test_on_schedule_completes_exactly_at_horizon():
    prof = np.array([500.0, 1500.0, 1000.0, 3000.0, 2000.0])
    state = play(make_order(h=5, q0=800.0), make_data(h=5, volume=prof, profile=prof), actions=[0.0])
    qs = [s.q for s in state.steps]
    assert len(qs) == 5
    np.testing.assert_allclose(qs, 800.0 * prof / prof.sum(), rtol=1e-12)
    # the final sweep only moves rounding dust
    assert state.steps[-1].q == pytest.approx(state.steps[-1].q_target, rel=1e-12)


def test_forced_sweep_at_last_minute():
    state = play(make_order(h=6), make_data(h=6), actions=[-1.0])
    assert [s.q for s in state.steps[:-1]] == [0.0] * 5
    assert state.steps[-1].q == 1000.0
    assert state.executed == 1000.0


def test_step_after_done_raises():
    state = play(make_order(h=3), make_data(h=3), actions=[0.0])
    with pytest.raises(EpisodeDoneError):
        step(state, action=0.0)


def test_invalid_action():
    state, _ = reset(make_order(), data=make_data())
    with pytest.raises(ValueError):
        step(state, action=0.3)


# ---------------------------------------------------------------------------
# reward


def test_arrival_component_sign():
    data = make_data(vwap=np.full(10, 100.05))
    state, _ = reset(make_order(), data=data)
    state, _, r, _, info = step(state, quantity=100.0)
    assert info["components"][0] == pytest.approx(0.05, abs=1e-12)
    assert r < 0


def test_on_target_deviation_zero():
    state, _ = reset(make_order(), data=make_data(sigma=0.02))
    state, _, _, _, info = step(state, action=0.0)
    assert info["components"][2] == pytest.approx(0.0, abs=1e-18)


def test_completion_penalty_formula():
    state, _ = reset(make_order(q0=1000.0), data=make_data(sigma=0.02))
    state.executed = 500.0
    _, comps = compute_reward(state, 0.0, 0.0, 1000.0)
    assert comps[3] == pytest.approx(0.02 / math.sqrt(390) * 0.5, rel=1e-12)
    assert comps[3] == pytest.approx(5.06e-4, abs=1e-6)


def test_reward_weights_validated():
    with pytest.raises(ValueError):
        RewardWeights(beta1=-1.0)
    assert RewardWeights().as_array().tolist() == [1.0, 1.0, 1.0, 0.1]


# ---------------------------------------------------------------------------
# invariants


action_paths = st.lists(st.sampled_from(ACTIONS.tolist()), min_size=1, max_size=40)


@settings(max_examples=100, deadline=None)
@given(action_paths, st.integers(1, 40), st.integers(0, 2**31))
def test_conservation(path, h, seed):
    r = np.random.default_rng(seed)
    vol = r.integers(0, 3000, h).astype(float)
    prof = r.uniform(100, 3000, h)
    mid = 100 * np.exp(np.cumsum(r.normal(0, 1e-3, h)))
    imp = ImpactParams(g0=1e-3, tau=3.0)
    q0 = float(r.uniform(10, 1e5))
    state, _ = reset(make_order(h=h, q0=q0, impact=imp), data=make_data(h=h, mid=mid, volume=vol, profile=prof, sigma=0.01))
    k = 0
    while not state.done:
        state, *_ = step(state, action=path[k % len(path)])
        k += 1
        total = math.fsum(s.q for s in state.steps)
        assert all(s.q >= 0 for s in state.steps)
        assert total + state.q_rem == pytest.approx(q0, rel=1e-12)
    assert state.executed == q0
    assert math.fsum(s.q for s in state.steps) == pytest.approx(q0, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(action_paths, st.integers(1, 30))
def test_flat_zero_impact_world_is_free(path, h):
    state = play(make_order(h=h), make_data(h=h), actions=path)
    for s in state.steps:
        # exact up to rounding in the running notional / executed ratio
        np.testing.assert_allclose(s.components, 0.0, atol=1e-12 * state.p0)
    assert state.fill_vwap == pytest.approx(state.p0, rel=1e-15)


@settings(max_examples=60, deadline=None)
@given(action_paths, st.integers(2, 30), st.integers(0, 2**31))
def test_buy_sell_mirror(path, h, seed):
    r = np.random.default_rng(seed)
    mid = 100 * np.exp(np.cumsum(r.normal(0, 1e-3, h)))
    vwap = mid * (1 + r.normal(0, 1e-4, h))
    data = make_data(h=h, mid=mid, vwap=vwap, volume=r.uniform(100, 2000, h), sigma=0.01)
    buy = play(make_order(h=h, side=1), data, actions=path)
    sell = play(make_order(h=h, side=-1), data, actions=path)
    for b, s in zip(buy.steps, sell.steps):
        assert b.q == s.q
        assert s.components[0] == pytest.approx(-b.components[0], abs=1e-12)
        assert s.components[1] == pytest.approx(-b.components[1], abs=1e-12)


def test_vectorized_equals_sequential(market, orders):
    pol = RandomPolicy()
    seq = [run_episode(pol, o, market, seed=3) for o in orders]
    par = run_episodes_vectorized(pol, orders, market, n_workers=4, seed=3)
    assert [r.to_json() for r in par] == [r.to_json() for r in seq]


def test_vectorized_empty(market):
    assert run_episodes_vectorized(RandomPolicy(), [], market, n_workers=4) == []


def test_failures_are_collected(market, orders):
    import dataclasses

    bad = dataclasses.replace(orders[0], symbol="NOPE", id="BAD")
    res = run_episodes_vectorized(ScheduleBaseline("twap"), [bad, orders[1]], market)
    assert res[0].error and "EpisodeSetupError" in res[0].error
    assert res[1].error is None and res[1].summary["completion"] == 1.0


def test_result_json_roundtrip(market, orders):
    res = run_episode(ConstantPolicy(0.25), orders[2], market)
    back = EpisodeResult.from_json(res.to_json())
    assert back.to_json() == res.to_json()
    assert [s.vwap for s in back.steps] == [s.vwap for s in res.steps]


def test_env_wrapper(market, orders):
    env = ExecutionEnv(market)
    obs = env.reset(orders[0])
    done = False
    while not done:
        obs, r, done, info = env.step(action=0.0)
    assert env.state.q_rem == 0.0
