"""Episodic execution environment: target-rate scaffolding, impact-adjusted
fills, 13-feature observations, four-part reward, and batched episode runs."""

from __future__ import annotations

import json
import logging
import math
import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .impact import ImpactState, fill_price, propagate_state
from .marketdata import SESSION_MINUTES
from .seeding import derive_seed

log = logging.getLogger(__name__)

ACTIONS = np.array([-1.0, -0.75, -0.5, -0.25, 0.0, 0.25, 0.5, 0.75, 1.0])
N_ACTIONS = ACTIONS.size
OBS_DIM = 13
OBS_FIELDS = (
    "mid_price",
    "market_volume",
    "time_remaining",
    "q_rem",
    "adv_pct",
    "ehv_pct",
    "last_fill_price",
    "last_fill_qty",
    "immediate_impact_bps",
    "cumulative_impact_bps",
    "arrival_price",
    "sigma_1",
    "sigma_5",
)
COMPONENTS = ("arrival", "vwap", "deviation", "completion")
SQRT_SESSION = math.sqrt(SESSION_MINUTES)


class EpisodeSetupError(ValueError):
    pass


class EpisodeDoneError(RuntimeError):
    pass


@dataclass(frozen=True)
class RewardWeights:
    beta1: float = 1.0
    beta2: float = 1.0
    beta3: float = 1.0
    beta4: float = 0.1

    def __post_init__(self):
        if min(self.beta1, self.beta2, self.beta3, self.beta4) < 0:
            raise ValueError("reward weights must be >= 0")

    def as_array(self):
        return np.array([self.beta1, self.beta2, self.beta3, self.beta4])


@dataclass
class EpisodeData:
    """Market inputs for one order, sliced to its horizon."""

    mid: np.ndarray
    vwap: np.ndarray
    volume: np.ndarray
    profile: np.ndarray
    sigma_1: float
    sigma_5: float
    p0: float

    def __post_init__(self):
        # expected remaining volume from minute t to the end of the horizon
        self.exp_remaining = np.concatenate([np.cumsum(self.profile[::-1])[::-1], [0.0]])

    @property
    def horizon(self):
        return self.mid.size

    @classmethod
    def from_market(cls, order, market):
        try:
            series = market.series(order.symbol, order.date)
        except KeyError as exc:
            raise EpisodeSetupError(str(exc)) from None
        sl = slice(order.start_minute, order.start_minute + order.horizon)
        mid = series.mid_price[sl].copy()
        if mid.size != order.horizon or not np.isfinite(mid[0]):
            raise EpisodeSetupError(f"{order.id}: no quote at start minute {order.start_minute}")
        mid = _ffill(mid)
        vwap = series["vwap"][sl].copy()
        vwap = np.where(np.isfinite(vwap), vwap, mid)
        volume = np.nan_to_num(series["trade_volume"][sl], nan=0.0)
        profile = market.profile(order.symbol, order.date)[sl].copy()
        st = market.stats_asof(order.symbol, order.date)
        return cls(mid=mid, vwap=vwap, volume=volume, profile=profile, sigma_1=st.sigma_1, sigma_5=st.sigma_5, p0=float(mid[0]))


def _ffill(x):
    x = x.copy()
    for i in range(1, x.size):
        if not np.isfinite(x[i]):
            x[i] = x[i - 1]
    return x


@dataclass
class StepRecord:
    t: int
    action: float
    q: float
    p_fill: float
    impact_bps: float
    mid: float
    vwap: float
    volume: float
    rho_target: float
    q_target: float
    components: tuple
    reward: float


@dataclass
class EpisodeState:
    order: object
    data: EpisodeData
    weights: RewardWeights
    impact_state: ImpactState
    t: int = 0
    executed: float = 0.0
    notional: float = 0.0
    mkt_pv: float = 0.0
    mkt_v: float = 0.0
    last_fill_price: float = math.nan
    last_fill_qty: float = 0.0
    done: bool = False
    fills: list = field(default_factory=list)
    steps: list = field(default_factory=list)

    @property
    def q0(self):
        return self.order.q0

    @property
    def q_rem(self):
        return max(self.order.q0 - self.executed, 0.0)

    @property
    def horizon(self):
        return self.order.horizon

    @property
    def p0(self):
        return self.data.p0

    @property
    def side(self):
        return self.order.side

    @property
    def expected_remaining_volume(self):
        return float(self.data.exp_remaining[min(self.t, self.horizon)])

    @property
    def fill_vwap(self):
        return self.notional / self.executed if self.executed > 0 else math.nan

    @property
    def market_vwap(self):
        return self.mkt_pv / self.mkt_v if self.mkt_v > 0 else math.nan


def reset(order, market=None, data=None, weights=None):
    """Fresh episode state and its first observation."""
    if data is None:
        if market is None:
            raise EpisodeSetupError("need market data or prepared episode data")
        data = EpisodeData.from_market(order, market)
    state = EpisodeState(
        order=order,
        data=data,
        weights=weights or RewardWeights(),
        impact_state=ImpactState(params=order.impact, last_update_minute=order.start_minute - 1),
    )
    state.last_fill_price = data.p0
    return state, build_observation(state)


def target_rate(state):
    """Remaining inventory over expected remaining market volume.

    With no expected volume left the rate is rebased to spread the remainder
    evenly over the remaining minutes.
    """
    q_rem = state.q_rem
    if q_rem <= 0:
        return 0.0
    ev = state.expected_remaining_volume
    if ev > 0:
        return q_rem / ev
    t = min(state.t, state.horizon - 1)
    v = state.data.volume[t]
    return q_rem / (state.horizon - t) / v if v > 0 else math.inf


def _target_quantity(state, rho):
    if rho == 0.0:
        return 0.0
    t = state.t
    if state.expected_remaining_volume > 0:
        return rho * state.data.volume[t]
    return state.q_rem / (state.horizon - t)


def compute_reward(state, q, rho_target, volume_used):
    """Reward for the step that just filled ``q``; returns ``(r, components)``.

    Arrival and VWAP terms are side-signed running fill-VWAP differences in
    price units; deviation and completion terms are scaled by the per-minute
    volatility sigma_daily / sqrt(390).
    """
    side = state.side
    if state.executed > 0:
        fvwap = state.notional / state.executed
        c_arr = side * (fvwap - state.p0)
        mv = state.market_vwap
        c_vwap = side * (fvwap - mv) if math.isfinite(mv) else 0.0
    else:
        c_arr = c_vwap = 0.0
    sig_min = state.data.sigma_1 / SQRT_SESSION
    if rho_target > 0 and math.isfinite(rho_target):
        rho_act = q / volume_used if volume_used > 0 else 0.0
        dev = sig_min * abs(rho_act - rho_target) / rho_target
    else:
        dev = 0.0
    zeta = sig_min * state.q_rem / state.q0
    comps = (c_arr, c_vwap, dev, zeta)
    w = state.weights
    r = -(w.beta1 * c_arr + w.beta2 * c_vwap + w.beta3 * dev + w.beta4 * zeta)
    return r, comps


def build_observation(state):
    d = state.data
    i = min(state.t, state.horizon - 1)
    imp = state.impact_state
    return np.array(
        [
            d.mid[i],
            d.volume[i],
            float(state.horizon - state.t),
            state.q_rem,
            state.order.adv_pct,
            state.order.ehv_pct,
            state.last_fill_price,
            state.last_fill_qty,
            imp.last_instant * 1e4,
            imp.accumulator * 1e4,
            d.p0,
            d.sigma_1,
            d.sigma_5,
        ]
    )


def _validate_action(a):
    k = int(np.argmin(np.abs(ACTIONS - a)))
    if abs(ACTIONS[k] - a) > 1e-9:
        raise ValueError(f"action {a} not in the action space")
    return float(ACTIONS[k])


def step(state, action=None, quantity=None):
    """Advance one minute. Pass ``action`` (scaffolded) or ``quantity`` (direct schedule).

    The last minute of the horizon sweeps whatever inventory is left.
    Returns ``(state, observation, reward, done, info)``; ``state`` is mutated.
    """
    if state.done:
        raise EpisodeDoneError("episode already finished")
    if (action is None) == (quantity is None):
        raise ValueError("pass exactly one of action or quantity")
    d = state.data
    t = state.t
    q_rem = state.q_rem
    rho = target_rate(state)
    q_tgt = _target_quantity(state, rho)
    if quantity is None:
        a = _validate_action(action)
        q = min(q_rem, (1.0 + a) * q_tgt)
    else:
        q = min(q_rem, max(0.0, float(quantity)))
        a = q / q_tgt - 1.0 if q_tgt > 0 else math.nan
    if t == state.horizon - 1:
        q = q_rem

    vol = d.volume[t]
    vol_used = vol if vol > 0 else (d.profile[t] if d.profile[t] > 0 else 1.0)
    state.impact_state = propagate_state(state.impact_state, (q, vol_used, state.side), 1)
    # the order's own flow always moves the price against it
    adverse = state.side * state.impact_state.accumulator
    p_fill = fill_price(d.vwap[t], state.side, adverse)

    if q > 0:
        state.executed += q
        state.notional += p_fill * q
        state.fills.append((t, q, p_fill))
        state.last_fill_price = p_fill
        state.last_fill_qty = q
    else:
        state.last_fill_qty = 0.0
    if q >= q_rem:
        state.executed = state.order.q0
    state.mkt_pv += d.vwap[t] * vol
    state.mkt_v += vol

    r, comps = compute_reward(state, q, rho, vol_used)
    state.steps.append(
        StepRecord(
            t=t,
            action=a,
            q=q,
            p_fill=p_fill,
            impact_bps=state.impact_state.accumulator * 1e4,
            mid=float(d.mid[t]),
            vwap=float(d.vwap[t]),
            volume=float(vol),
            rho_target=rho,
            q_target=q_tgt,
            components=comps,
            reward=r,
        )
    )
    state.t = t + 1
    state.done = state.q_rem <= 0 or state.t >= state.horizon
    info = {"q": q, "p_fill": p_fill, "components": comps, "action": a, "rho_target": rho}
    return state, build_observation(state), r, state.done, info


class ExecutionEnv:
    """reset/step wrapper around one order at a time."""

    def __init__(self, market, weights=None):
        self.market = market
        self.weights = weights or RewardWeights()
        self.state = None
        self._cache = {}

    def episode_data(self, order):
        if order.id not in self._cache:
            self._cache[order.id] = EpisodeData.from_market(order, self.market)
        return self._cache[order.id]

    def reset(self, order):
        self.state, obs = reset(order, data=self.episode_data(order), weights=self.weights)
        return obs

    def step(self, action=None, quantity=None):
        _, obs, r, done, info = step(self.state, action=action, quantity=quantity)
        return obs, r, done, info


# ---------------------------------------------------------------------------
# episode results


@dataclass
class EpisodeResult:
    order_id: str
    symbol: str
    date: str
    side: int
    q0: float
    p0: float
    horizon: int
    steps: list
    summary: dict
    error: str | None = None

    def to_json(self):
        d = {
            "order_id": self.order_id,
            "symbol": self.symbol,
            "date": self.date,
            "side": self.side,
            "q0": self.q0,
            "p0": self.p0,
            "horizon": self.horizon,
            "steps": [
                {
                    "t": s.t,
                    "a": s.action,
                    "q": s.q,
                    "p_fill": s.p_fill,
                    "I_bps": s.impact_bps,
                    "mid": s.mid,
                    "vwap": s.vwap,
                    "volume": s.volume,
                    "rho_target": s.rho_target,
                    "q_target": s.q_target,
                    "reward": s.reward,
                    **{"c_" + c: v for c, v in zip(COMPONENTS, s.components)},
                }
                for s in self.steps
            ],
            "summary": self.summary,
            "error": self.error,
        }
        return json.dumps(_finite(d), sort_keys=True)

    @classmethod
    def from_json(cls, line):
        d = json.loads(line)
        steps = [
            StepRecord(
                t=s["t"],
                action=_num(s["a"]),
                q=s["q"],
                p_fill=s["p_fill"],
                impact_bps=s["I_bps"],
                mid=s["mid"],
                vwap=s["vwap"],
                volume=s["volume"],
                rho_target=_num(s["rho_target"]),
                q_target=s["q_target"],
                components=tuple(s["c_" + c] for c in COMPONENTS),
                reward=s["reward"],
            )
            for s in d["steps"]
        ]
        return cls(
            order_id=d["order_id"],
            symbol=d["symbol"],
            date=d["date"],
            side=d["side"],
            q0=d["q0"],
            p0=d["p0"],
            horizon=d["horizon"],
            steps=steps,
            summary={k: _num(v) for k, v in d["summary"].items()},
            error=d["error"],
        )


def _finite(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    return obj


def _num(v):
    return math.nan if v is None else v


def summarize(state):
    """Episode-level summary straight from the engine's running values."""
    p0 = state.p0
    side = state.side
    fv = state.fill_vwap
    executed = state.executed
    total = sum(s.reward for s in state.steps)
    trades = [s.t for s in state.steps if s.q > 0]
    acts = [s.action for s in state.steps if math.isfinite(s.action)]
    end_mid = state.steps[-1].mid if state.steps else p0
    return {
        "arrival_slippage_bps": 1e4 * side * (fv - p0) / p0 if executed > 0 else math.nan,
        "vwap_slippage": side * (fv - state.market_vwap) if executed > 0 else math.nan,
        "total_cost": -total,
        "total_cost_bps": -1e4 * total / p0,
        "completion": executed / state.q0,
        "duration_pct": 100.0 * (trades[-1] / state.horizon if trades else 0.0),
        "return_drift_bps": 1e4 * side * (end_mid - p0) / p0,
        "mean_action": float(np.mean(acts)) if acts else math.nan,
        "n_steps": len(state.steps),
        "notional": state.notional,
    }


def run_episode(policy, order, market=None, seed=0, weights=None, data=None):
    """Roll one order to completion under ``policy``."""
    rng = np.random.default_rng(derive_seed(seed, "episode", order.id))
    state, obs = reset(order, market=market, data=data, weights=weights)
    if hasattr(policy, "begin"):
        policy.begin(state)
    while not state.done:
        if policy.mode == "quantity":
            state, obs, _, _, _ = step(state, quantity=policy.act(obs, rng, state))
        else:
            state, obs, _, _, _ = step(state, action=policy.act(obs, rng, state))
    return EpisodeResult(
        order_id=order.id,
        symbol=order.symbol,
        date=order.date,
        side=order.side,
        q0=order.q0,
        p0=state.p0,
        horizon=order.horizon,
        steps=state.steps,
        summary=summarize(state),
    )


def _safe_episode(policy, order, market, seed, weights):
    try:
        return run_episode(policy, order, market, seed=seed, weights=weights)
    except Exception as exc:  # collected per episode, the batch continues
        log.warning("episode %s failed: %s", order.id, exc)
        return EpisodeResult(order.id, order.symbol, order.date, order.side, order.q0, math.nan,
                             order.horizon, [], {}, error=f"{type(exc).__name__}: {exc}")


_WORKER = {}


def _init_worker(policy, market, seed, weights):
    _WORKER.update(policy=policy, market=market, seed=seed, weights=weights)


def _worker_run(orders):
    w = _WORKER
    return [_safe_episode(w["policy"], o, w["market"], w["seed"], w["weights"]) for o in orders]


def run_episodes_vectorized(policy, orders, market, n_workers=1, seed=0, weights=None):
    """Run every order; results come back in input order and do not depend on ``n_workers``."""
    orders = list(orders)
    if not orders:
        return []
    if n_workers <= 1 or len(orders) == 1:
        return [_safe_episode(policy, o, market, seed, weights) for o in orders]
    n_workers = min(n_workers, len(orders))
    chunks = [orders[i::n_workers] for i in range(n_workers)]
    ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else None
    with ProcessPoolExecutor(n_workers, mp_context=ctx, initializer=_init_worker,
                             initargs=(policy, market, seed, weights)) as ex:
        parts = list(ex.map(_worker_run, chunks))
    by_id = {r.order_id: r for part in parts for r in part}
    return [by_id[o.id] for o in orders]


def results_to_dicts(results):
    return [asdict(r) for r in results]
