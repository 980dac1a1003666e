"""Small synthetic worlds with a planted answer, used to check that the
learners pick up an edge that is known to exist."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .engine import EpisodeDoneError
from .impact import CalibrationEntry, ImpactParams
from .marketdata import MarketData, SynthConfig, synth_generate
from .orders import Order, OrderGenConfig, generate_orders
from .seeding import derive_seed


TOY_PRICE = 100.0


@dataclass
class ToyWorld:
    market: MarketData
    train: list
    test: list


def _store(market, g0=0.0, tau=5.0):
    params = ImpactParams(g0=g0, tau=tau, form="sqrt")
    return {s: CalibrationEntry(s, params, True) for s in market.symbols}


def _split_orders(market, store, n_train, n_test, seed, horizon_range, side_prob, split_at):
    dates = market.all_dates()
    cut = dates[split_at]
    train = generate_orders(
        OrderGenConfig(n_train, dates[1], dates[split_at - 1], horizon_range=horizon_range, side_prob=side_prob, ehv_pct_range=(1.0, 10.0), seed=seed),
        market,
        store,
    )
    test = generate_orders(
        OrderGenConfig(n_test, cut, dates[-1], horizon_range=horizon_range, side_prob=side_prob, ehv_pct_range=(1.0, 10.0), seed=seed + 1),
        market,
        store,
    )
    test = [dataclasses.replace(o, id="T" + o.id[1:]) for o in test]
    return train, test


class DriftToyEnv:
    """Minimal execution env with a planted price drift, for testing the learner.

    Same 13-feature observation and (1 + a) target-rate scaffolding as the
    engine, but flat volume, no own impact, and a per-fill reward equal to the
    incremental implementation shortfall in bps, so the episode return is the
    order's arrival cost. With ``drift_bps > 0`` buys face rising prices and
    trading early is cheaper.
    """

    def __init__(self, drift_bps=2.0, noise_bps=1.0, volume=1000.0, seed=0):
        self.drift_bps = drift_bps
        self.noise_bps = noise_bps
        self.volume = volume
        self.seed = seed
        self.state = None
        self._resets = 0

    def reset(self, order):
        rng = np.random.default_rng(derive_seed(self.seed, "toy", order.id, self._resets))
        self._resets += 1
        h = order.horizon
        steps = self.drift_bps + self.noise_bps * rng.standard_normal(h)
        steps[0] = 0.0
        mid = TOY_PRICE * (1.0 + 1e-4 * order.side * np.cumsum(steps))
        self.state = _ToyState(order=order, mid=mid, q_rem=order.q0)
        return self._obs()

    def _obs(self):
        s = self.state
        i = min(s.t, s.horizon - 1)
        return np.array(
            [
                s.mid[i],
                self.volume,
                float(s.horizon - s.t),
                s.q_rem,
                s.order.adv_pct,
                s.order.ehv_pct,
                s.last_price,
                s.last_qty,
                0.0,
                0.0,
                s.mid[0],
                0.01,
                0.01,
            ]
        )

    def step(self, action=None, quantity=None):
        s = self.state
        if s.done:
            raise EpisodeDoneError("episode already finished")
        t = s.t
        rho = s.q_rem / (self.volume * (s.horizon - t))
        q = min(s.q_rem, (1.0 + float(action)) * rho * self.volume)
        if t == s.horizon - 1:
            q = s.q_rem
        p = s.mid[t]
        r = -1e4 * s.order.side * q * (p - s.mid[0]) / (s.order.q0 * s.mid[0])
        s.q_rem -= q
        if q > 0:
            s.last_price, s.last_qty = p, q
        s.t = t + 1
        s.done = s.q_rem <= 1e-12 or s.t >= s.horizon
        if s.done:
            s.q_rem = 0.0
        return self._obs(), r, s.done, {"q": q}


@dataclass
class _ToyState:
    order: object
    mid: np.ndarray
    q_rem: float
    t: int = 0
    done: bool = False
    last_price: float = 0.0
    last_qty: float = 0.0

    def __post_init__(self):
        self.last_price = float(self.mid[0])

    @property
    def horizon(self):
        return self.order.horizon


def toy_orders(n, seed=0, horizon=20, side=1, prefix="D"):
    """Toy parent orders; only horizon, side and size matter to :class:`DriftToyEnv`."""
    rng = np.random.default_rng(seed)
    params = ImpactParams(g0=0.0, tau=5.0)
    out = []
    for i in range(n):
        q0 = float(rng.uniform(500.0, 5000.0))
        out.append(Order(f"{prefix}{i:06d}", "TOY", "20220103", 0, horizon, q0, side, 5.0, 1.0, params))
    return out


def regime_world(seed=0, n_days=30, drift=0.03, n_per_regime=3, n_train=600, n_test=300, horizon_range=(30, 90)):
    """Buy orders where the best aggressiveness depends on the volatility regime.

    Quiet symbols drift down through the day (waiting pays), volatile symbols
    drift up (hurrying pays), so one fixed schedule cannot be best everywhere.
    """
    quiet = SynthConfig(n_symbols=n_per_regime, n_days=n_days, daily_vol_range=(0.002, 0.004), daily_drift=-drift, seed=seed)
    loud = SynthConfig(n_symbols=n_per_regime, n_days=n_days, daily_vol_range=(0.012, 0.016), daily_drift=drift, seed=seed + 10_000)
    raw = {}
    for tag, cfg in (("Q", quiet), ("V", loud)):
        for sym, days in synth_generate(cfg).items():
            name = tag + sym[1:]
            raw[name] = {d: dataclasses.replace(b, symbol=name) for d, b in days.items()}
    market = MarketData.from_raw(raw)
    store = _store(market)
    train, test = _split_orders(market, store, n_train, n_test, seed, horizon_range, 1.0, int(n_days * 0.7))
    return ToyWorld(market, train, test)
