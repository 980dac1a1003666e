"""Parent-order generation with calendar-separated train/test windows."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .impact import ImpactParams
from .marketdata import SESSION_MINUTES

ORDER_COLUMNS = (
    "id",
    "symbol",
    "date",
    "start_minute",
    "horizon",
    "q0",
    "side",
    "ehv_pct",
    "adv_pct",
    "g0",
    "tau",
    "gamma",
    "form",
)


class OrderGenerationError(ValueError):
    pass


class CalendarError(ValueError):
    """Date ranges that break train/test separation."""


@dataclass(frozen=True)
class Order:
    id: str
    symbol: str
    date: str
    start_minute: int
    horizon: int
    q0: float
    side: int
    ehv_pct: float
    adv_pct: float
    impact: ImpactParams

    def __post_init__(self):
        if not 1 <= self.horizon <= SESSION_MINUTES:
            raise ValueError(f"{self.id}: horizon {self.horizon} outside 1..{SESSION_MINUTES}")
        if self.start_minute < 0 or self.start_minute + self.horizon > SESSION_MINUTES:
            raise ValueError(f"{self.id}: order runs past the session close")
        if not self.q0 > 0:
            raise ValueError(f"{self.id}: q0 must be positive")
        if self.side not in (1, -1):
            raise ValueError(f"{self.id}: side must be +1 or -1")


@dataclass
class OrderGenConfig:
    n_orders: int
    date_from: str
    date_to: str
    ehv_pct_range: tuple = (0.5, 20.0)
    horizon_range: tuple = (1, SESSION_MINUTES)
    side_prob: float = 0.5
    seed: int = 0
    bound: tuple | None = None
    symbols: tuple | None = None

    def validate(self):
        if self.n_orders < 0:
            raise OrderGenerationError("n_orders must be >= 0")
        if self.date_from > self.date_to:
            raise OrderGenerationError(f"empty date range {self.date_from}..{self.date_to}")
        if not 0.0 <= self.side_prob <= 1.0:
            raise OrderGenerationError("side_prob must lie in [0, 1]")
        lo, hi = self.ehv_pct_range
        if not 0 < lo <= hi:
            raise OrderGenerationError("ehv_pct_range must satisfy 0 < lo <= hi")
        hlo, hhi = self.horizon_range
        if not 1 <= hlo <= hhi <= SESSION_MINUTES:
            raise OrderGenerationError(f"horizon_range must lie within 1..{SESSION_MINUTES}")
        if self.bound is not None:
            blo, bhi = self.bound
            if self.date_from < blo or self.date_to > bhi:
                raise CalendarError(
                    f"order dates {self.date_from}..{self.date_to} fall outside the run window {blo}..{bhi}"
                )


def check_calendar_separation(train, test):
    """Raise unless the train window ends strictly before the test window starts."""
    (a0, a1), (b0, b1) = train, test
    if a0 > a1 or b0 > b1:
        raise CalendarError("empty date range")
    if not a1 < b0:
        raise CalendarError(f"train window {a0}..{a1} overlaps or follows test window {b0}..{b1}")


def generate_orders(config, market, store):
    """Sample parent orders over retained symbols and the configured dates.

    ``q0 = ehv_pct% * expected horizon volume`` with the expectation taken from
    the trailing intraday volume profile; ``ehv_pct`` is log-uniform and the
    start minute uniform over positions that fit the horizon.
    """
    config.validate()
    retained = sorted(s for s, e in store.items() if e.retained and s in market.bars)
    if config.symbols is not None:
        retained = [s for s in retained if s in set(config.symbols)]
    if not retained:
        raise OrderGenerationError("no retained symbols with market data")
    pairs = [(s, d) for s in retained for d in market.dates(s) if config.date_from <= d <= config.date_to]
    if not pairs:
        raise OrderGenerationError(f"no market data between {config.date_from} and {config.date_to}")

    rng = np.random.default_rng(config.seed)
    lo, hi = config.ehv_pct_range
    hlo, hhi = config.horizon_range
    out = []
    for i in range(config.n_orders):
        for _ in range(100):
            symbol, date = pairs[rng.integers(len(pairs))]
            horizon = int(rng.integers(hlo, hhi + 1))
            start = int(rng.integers(0, SESSION_MINUTES - horizon + 1))
            side = 1 if rng.random() < config.side_prob else -1
            ehv_pct = math.exp(rng.uniform(math.log(lo), math.log(hi)))
            ehv = float(market.profile(symbol, date)[start : start + horizon].sum())
            if ehv > 0:
                break
        else:
            raise OrderGenerationError("could not find a window with positive expected volume")
        q0 = ehv_pct / 100.0 * ehv
        adv = market.stats_asof(symbol, date).adv_21
        out.append(
            Order(
                id=f"O{i:06d}",
                symbol=symbol,
                date=date,
                start_minute=start,
                horizon=horizon,
                q0=q0,
                side=side,
                ehv_pct=ehv_pct,
                adv_pct=100.0 * q0 / adv if adv > 0 else math.nan,
                impact=store[symbol].params,
            )
        )
    return out


def write_orders(orders, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ORDER_COLUMNS)
        for o in orders:
            p = o.impact
            w.writerow(
                [o.id, o.symbol, o.date, o.start_minute, o.horizon, repr(o.q0), o.side,
                 repr(o.ehv_pct), repr(o.adv_pct), repr(p.g0), repr(p.tau), repr(p.gamma), p.form]
            )


def read_orders(path):
    out = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != ORDER_COLUMNS:
            raise ValueError(f"{path}: expected columns {list(ORDER_COLUMNS)}")
        for row in reader:
            out.append(
                Order(
                    id=row["id"],
                    symbol=row["symbol"],
                    date=row["date"],
                    start_minute=int(row["start_minute"]),
                    horizon=int(row["horizon"]),
                    q0=float(row["q0"]),
                    side=int(row["side"]),
                    ehv_pct=float(row["ehv_pct"]),
                    adv_pct=float(row["adv_pct"]),
                    impact=ImpactParams(
                        g0=float(row["g0"]), tau=float(row["tau"]), form=row["form"], gamma=float(row["gamma"])
                    ),
                )
            )
    return out
