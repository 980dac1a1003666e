"""Minute-bar loading, cleaning, synthesis and daily analytics."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kernels

log = logging.getLogger(__name__)

SESSION_MINUTES = 390
STATS_WINDOW = 21
VOL_CLIP = (1e-4, 2.0)
MISSING_CEILING = 0.07
RETURN_OUTLIER = 0.10
VOLATILITY_WINDOW = 21

BAR_COLUMNS = (
    "time",
    "trade_count",
    "trade_volume",
    "hid_vol",
    "unsided_vol",
    "sell_vol",
    "buy_vol",
    "bid_price",
    "ask_price",
    "bid_size",
    "ask_size",
    "trade_last",
    "trade_high",
    "trade_low",
    "vwap",
)
VALUE_COLUMNS = BAR_COLUMNS[1:]
QUOTE_COLUMNS = ("bid_price", "ask_price", "bid_size", "ask_size")
VOLUME_COLUMNS = ("trade_count", "trade_volume", "hid_vol", "unsided_vol", "sell_vol", "buy_vol")

STATS_COLUMNS = (
    "symbol",
    "date",
    "adv_21",
    "avg_trade_count_21",
    "avg_spread_21",
    "avg_depth_21",
    "vwap",
    "daily_volatility",
    "daily_vol_lag1",
    "daily_vol_5d",
    "trade_high",
    "trade_low",
)


class BarParseError(ValueError):
    """Malformed minute-bar row."""

    def __init__(self, path, line, msg):
        super().__init__(f"{path}:{line}: {msg}")
        self.path = str(path)
        self.line = line


class BarSchemaError(ValueError):
    pass


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RowReject:
    path: str
    line: int
    reason: str


@dataclass(frozen=True)
class MinuteBar:
    time: int
    trade_count: float
    trade_volume: float
    hid_vol: float
    unsided_vol: float
    sell_vol: float
    buy_vol: float
    bid_price: float
    ask_price: float
    bid_size: float
    ask_size: float
    trade_last: float
    trade_high: float
    trade_low: float
    vwap: float
    mid_price: float
    trade_imbalance: float
    volatility: float


def _mid(bid, ask):
    return (bid + ask) / 2.0


def _imbalance(buy, sell, volume):
    with np.errstate(invalid="ignore", divide="ignore"):
        out = (buy - sell) / volume
    return np.where(volume > 0, out, np.nan)


@dataclass
class BarSeries:
    """One symbol-day of minute bars stored column-wise.

    ``columns`` maps every name in :data:`VALUE_COLUMNS` to a float array
    aligned with ``time``; missing values are NaN.
    """

    symbol: str
    date: str
    time: np.ndarray
    columns: dict
    status: str = "raw"
    missing_fraction: float = 0.0
    return_mask: np.ndarray | None = None

    def __post_init__(self):
        self.time = np.asarray(self.time, dtype=np.int64)
        if self.time.size > SESSION_MINUTES:
            raise ValueError(f"{self.symbol} {self.date}: more than {SESSION_MINUTES} bars")
        if self.time.size > 1 and np.any(np.diff(self.time) <= 0):
            raise ValueError(f"{self.symbol} {self.date}: bar times not strictly increasing")
        for name in VALUE_COLUMNS:
            col = self.columns.get(name)
            if col is None:
                col = np.full(self.time.size, np.nan)
            self.columns[name] = np.asarray(col, dtype=np.float64)

    def __len__(self):
        return self.time.size

    def __getitem__(self, name):
        return self.columns[name]

    @property
    def mid_price(self):
        return _mid(self.columns["bid_price"], self.columns["ask_price"])

    @property
    def trade_imbalance(self):
        return _imbalance(self.columns["buy_vol"], self.columns["sell_vol"], self.columns["trade_volume"])

    @property
    def volatility(self):
        """21-minute rolling std of mid log returns (NaN until two returns exist)."""
        r = self.mid_returns()
        out = np.full(r.size, np.nan)
        if r.size == 0:
            return out
        padded = np.concatenate([np.full(VOLATILITY_WINDOW - 1, np.nan), r])
        windows = np.lib.stride_tricks.sliding_window_view(padded, VOLATILITY_WINDOW)
        counts = np.sum(~np.isnan(windows), axis=1)
        with np.errstate(invalid="ignore"), _quiet():
            sd = np.nanstd(windows, axis=1, ddof=1)
        out[counts >= 2] = sd[counts >= 2]
        return out

    @property
    def dropped(self):
        return self.status == "dropped"

    def mid_returns(self):
        """Log mid returns aligned with bars; NaN at the first bar and across masks."""
        mid = self.mid_price
        r = np.full(mid.size, np.nan)
        if mid.size > 1:
            with np.errstate(invalid="ignore", divide="ignore"):
                r[1:] = np.log(mid[1:] / mid[:-1])
        if self.return_mask is not None:
            r[~self.return_mask] = np.nan
        return r

    def bar(self, i):
        vals = {name: float(self.columns[name][i]) for name in VALUE_COLUMNS}
        return MinuteBar(
            time=int(self.time[i]),
            mid_price=float(self.mid_price[i]),
            trade_imbalance=float(self.trade_imbalance[i]),
            volatility=float(self.volatility[i]),
            **vals,
        )

    def copy(self):
        return replace(
            self,
            time=self.time.copy(),
            columns={k: v.copy() for k, v in self.columns.items()},
            return_mask=None if self.return_mask is None else self.return_mask.copy(),
        )


@contextmanager
def _quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


# ---------------------------------------------------------------------------
# CSV I/O


def _parse_float(text):
    text = text.strip()
    if text == "":
        return math.nan
    return float(text)


def _row_problem(row):
    bid, ask = row["bid_price"], row["ask_price"]
    if not (math.isnan(bid) or math.isnan(ask)) and bid > ask:
        return f"bid_price {bid} > ask_price {ask}"
    vol = row["trade_volume"]
    if not math.isnan(vol) and vol > 0:
        lo, hi, vw = row["trade_low"], row["trade_high"], row["vwap"]
        if not any(math.isnan(x) for x in (lo, hi, vw)):
            tol = 1e-9 * max(abs(hi), 1.0)
            if not (lo - tol <= vw <= hi + tol):
                return f"vwap {vw} outside [{lo}, {hi}]"
        sided = sum(0.0 if math.isnan(row[k]) else row[k] for k in ("buy_vol", "sell_vol", "unsided_vol"))
        if sided > vol * (1 + 1e-9) + 1e-9:
            return f"buy+sell+unsided {sided} exceeds trade_volume {vol}"
    for k in VOLUME_COLUMNS:
        if row[k] < 0:
            return f"{k} negative"
    return None


def read_bar_csv(path, symbol, date, rejects=None):
    """Parse one symbol-day CSV; invariant violations are skipped and reported."""
    path = Path(path)
    rows = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise BarParseError(path, 1, "missing header row") from None
        unknown = [h for h in header if h not in BAR_COLUMNS]
        if unknown:
            raise BarSchemaError(f"{path}: unknown column(s) {unknown}")
        if tuple(header) != BAR_COLUMNS:
            raise BarSchemaError(f"{path}: expected columns {list(BAR_COLUMNS)}, got {header}")
        last_time = -1
        for lineno, fields_ in enumerate(reader, start=2):
            if not fields_ or all(not f.strip() for f in fields_):
                continue
            if len(fields_) != len(BAR_COLUMNS):
                raise BarParseError(path, lineno, f"expected {len(BAR_COLUMNS)} fields, got {len(fields_)}")
            try:
                t = int(fields_[0])
                row = {name: _parse_float(v) for name, v in zip(VALUE_COLUMNS, fields_[1:])}
            except ValueError as exc:
                raise BarParseError(path, lineno, str(exc)) from None
            reason = None
            if not 0 <= t < SESSION_MINUTES:
                reason = f"time {t} outside session"
            elif t <= last_time:
                reason = f"time {t} not increasing"
            else:
                reason = _row_problem(row)
            if reason is not None:
                log.warning("%s:%d rejected: %s", path, lineno, reason)
                if rejects is not None:
                    rejects.append(RowReject(str(path), lineno, reason))
                continue
            last_time = t
            rows.append((t, row))
    time = np.array([t for t, _ in rows], dtype=np.int64)
    cols = {name: np.array([r[name] for _, r in rows], dtype=np.float64) for name in VALUE_COLUMNS}
    return BarSeries(symbol=symbol, date=date, time=time, columns=cols)


def load_minute_bars(path, symbol_filter=None, rejects=None):
    """Load ``<root>/<SYMBOL>/<YYYYMMDD>.csv`` files into ``{symbol: {date: BarSeries}}``.

    ``path`` may also point at a single symbol-day file. Rows breaking a bar
    invariant are skipped and appended to ``rejects``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    files = [path] if path.is_file() else sorted(path.glob("*/*.csv"))
    wanted = None if symbol_filter is None else set(symbol_filter)
    out = {}
    for f in files:
        symbol, date = f.parent.name, f.stem
        if wanted is not None and symbol not in wanted:
            continue
        out.setdefault(symbol, {})[date] = read_bar_csv(f, symbol, date, rejects)
    return {s: dict(sorted(days.items())) for s, days in sorted(out.items())}


def _fmt(x):
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def write_bar_csv(series, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BAR_COLUMNS)
        for i, t in enumerate(series.time):
            w.writerow([int(t)] + [_fmt(series.columns[c][i]) for c in VALUE_COLUMNS])


def write_minute_bars(data, root):
    root = Path(root)
    for symbol, days in data.items():
        for date, series in days.items():
            write_bar_csv(series, root / symbol / f"{date}.csv")


# ---------------------------------------------------------------------------
# cleaning


def _single_gaps(missing):
    """Indices of missing runs of length exactly one with a present predecessor."""
    n = missing.size
    idx = np.flatnonzero(missing)
    keep = []
    for i in idx:
        if i == 0 or missing[i - 1]:
            continue
        if i + 1 < n and missing[i + 1]:
            continue
        keep.append(i)
    return np.asarray(keep, dtype=np.int64)


def clean_bars(series, missing_ceiling=MISSING_CEILING, outlier=RETURN_OUTLIER):
    """Reindex to the full session, fill one-bar quote gaps, build the return mask.

    The series is marked ``dropped`` when its missing-quote fraction exceeds
    ``missing_ceiling``; a series dropped once stays dropped.
    """
    if len(series) == 0:
        raise ValueError("clean_bars needs a nonempty series")
    full = np.arange(SESSION_MINUTES)
    cols = {}
    for name in VALUE_COLUMNS:
        col = np.full(SESSION_MINUTES, np.nan)
        col[series.time] = series.columns[name]
        cols[name] = col
    for name in VOLUME_COLUMNS:
        cols[name] = np.nan_to_num(cols[name], nan=0.0)

    missing = np.isnan(cols["bid_price"]) | np.isnan(cols["ask_price"])
    gaps = _single_gaps(missing)
    if gaps.size:
        for name in QUOTE_COLUMNS:
            cols[name][gaps] = cols[name][gaps - 1]
    missing = np.isnan(cols["bid_price"]) | np.isnan(cols["ask_price"])
    frac = float(missing.mean())

    out = BarSeries(symbol=series.symbol, date=series.date, time=full, columns=cols)
    traded = (cols["trade_count"] > 0) & (cols["trade_volume"] > 0)
    mid = out.mid_price
    ok = np.zeros(SESSION_MINUTES, dtype=bool)
    ok[1:] = traded[1:] & ~np.isnan(mid[1:]) & ~np.isnan(mid[:-1])
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.zeros(SESSION_MINUTES)
        r[1:] = np.log(mid[1:] / mid[:-1])
    ok &= ~(np.abs(np.nan_to_num(r, nan=np.inf)) > outlier)
    out.return_mask = ok
    out.missing_fraction = frac
    dropped = series.status == "dropped" or frac > missing_ceiling
    out.status = "dropped" if dropped else "clean"
    return out


def clean_dataset(data, missing_ceiling=MISSING_CEILING, outlier=RETURN_OUTLIER):
    """Clean every symbol-day; drop whole symbols whose pooled missing fraction is too high."""
    out = {}
    for symbol, days in data.items():
        cleaned = {d: clean_bars(s, missing_ceiling=1.0, outlier=outlier) for d, s in days.items()}
        pooled = float(np.mean([s.missing_fraction for s in cleaned.values()])) if cleaned else 0.0
        status = "dropped" if pooled > missing_ceiling else "clean"
        for s in cleaned.values():
            s.status = status
        if status == "dropped":
            log.info("dropping %s: %.1f%% missing", symbol, 100 * pooled)
        out[symbol] = cleaned
    return out


# ---------------------------------------------------------------------------
# daily analytics


@dataclass(frozen=True)
class DailyStats:
    symbol: str
    date: str
    adv_21: float
    avg_trade_count_21: float
    avg_spread_21: float
    avg_depth_21: float
    vwap_day: float
    sigma_1: float
    sigma_2: float
    sigma_5: float
    trade_high_day: float
    trade_low_day: float
    volume_day: float = field(default=0.0, compare=False)

    def to_row(self):
        return {
            "symbol": self.symbol,
            "date": self.date,
            "adv_21": self.adv_21,
            "avg_trade_count_21": self.avg_trade_count_21,
            "avg_spread_21": self.avg_spread_21,
            "avg_depth_21": self.avg_depth_21,
            "vwap": self.vwap_day,
            "daily_volatility": self.sigma_1,
            "daily_vol_lag1": self.sigma_2,
            "daily_vol_5d": self.sigma_5,
            "trade_high": self.trade_high_day,
            "trade_low": self.trade_low_day,
        }


def parkinson_vol(highs, lows, w):
    """High-low volatility over the last ``w`` entries (unclipped)."""
    highs = np.asarray(highs, dtype=np.float64)
    lows = np.asarray(lows, dtype=np.float64)
    if w < 1:
        raise ValueError("window must be >= 1")
    if highs.shape != lows.shape or highs.size < w:
        raise ValueError("need at least w highs and lows of equal length")
    h, l = highs[-w:], lows[-w:]
    if np.any(l <= 0):
        raise ValueError("prices must be positive")
    if np.any(h < l):
        raise ValueError("high below low")
    ranges = np.log(h / l)
    return float(np.sqrt(np.sum(ranges**2) / (4.0 * w * math.log(2.0))))


def _clip_vol(x):
    return float(min(max(x, VOL_CLIP[0]), VOL_CLIP[1]))


def _day_summary(series):
    c = series.columns
    vol = np.nan_to_num(c["trade_volume"], nan=0.0)
    count = np.nan_to_num(c["trade_count"], nan=0.0)
    with _quiet():
        spread = float(np.nanmean(c["ask_price"] - c["bid_price"]))
        depth = float(np.nanmean((c["bid_size"] + c["ask_size"]) / 2.0))
    total = float(vol.sum())
    vw = c["vwap"]
    ok = (vol > 0) & ~np.isnan(vw)
    if ok.any() and vol[ok].sum() > 0:
        vwap_day = float(np.sum(vw[ok] * vol[ok]) / vol[ok].sum())
    else:
        last = c["trade_last"][~np.isnan(c["trade_last"])]
        vwap_day = float(last[-1]) if last.size else math.nan
    hi = c["trade_high"][(vol > 0) & ~np.isnan(c["trade_high"])]
    lo = c["trade_low"][(vol > 0) & ~np.isnan(c["trade_low"])]
    high = float(hi.max()) if hi.size else math.nan
    low = float(lo.min()) if lo.size else math.nan
    return total, float(count.sum()), spread, depth, vwap_day, high, low


def compute_daily_stats(days, window=STATS_WINDOW):
    """Daily analytics for one symbol from ``{date: BarSeries}`` (dates ascending).

    Early dates average over whatever history exists (at least the day itself).
    """
    dates = sorted(days)
    if not dates:
        raise ValueError("need at least one day")
    summaries = [_day_summary(days[d]) for d in dates]
    vols = np.array([s[0] for s in summaries])
    counts = np.array([s[1] for s in summaries])
    spreads = np.array([s[2] for s in summaries])
    depths = np.array([s[3] for s in summaries])
    highs = np.array([s[5] for s in summaries])
    lows = np.array([s[6] for s in summaries])
    symbol = days[dates[0]].symbol
    out = []
    for i, d in enumerate(dates):
        lo = max(0, i - window + 1)
        with _quiet():
            spread = float(np.nanmean(spreads[lo : i + 1]))
            depth = float(np.nanmean(depths[lo : i + 1]))
        sig = {}
        for w in (1, 2, 5):
            a = max(0, i - w + 1)
            h, l = highs[a : i + 1], lows[a : i + 1]
            ok = ~np.isnan(h) & ~np.isnan(l) & (l > 0)
            if np.isnan(highs[i]) or not ok.any():
                sig[w] = VOL_CLIP[0]
            else:
                sig[w] = _clip_vol(parkinson_vol(h[ok], l[ok], int(ok.sum())))
        out.append(
            DailyStats(
                symbol=symbol,
                date=d,
                adv_21=float(vols[lo : i + 1].mean()),
                avg_trade_count_21=float(counts[lo : i + 1].mean()),
                avg_spread_21=spread,
                avg_depth_21=depth,
                vwap_day=summaries[i][4],
                sigma_1=sig[1],
                sigma_2=sig[2],
                sigma_5=sig[5],
                trade_high_day=float(highs[i]),
                trade_low_day=float(lows[i]),
                volume_day=float(vols[i]),
            )
        )
    return out


def write_daily_stats(stats, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STATS_COLUMNS)
        for s in stats:
            row = s.to_row()
            w.writerow([row["symbol"], row["date"]] + [_fmt(row[k]) for k in STATS_COLUMNS[2:]])


def read_daily_stats(path):
    path = Path(path)
    out = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != STATS_COLUMNS:
            raise BarSchemaError(f"{path}: expected columns {list(STATS_COLUMNS)}")
        for row in reader:
            v = {k: _parse_float(row[k]) for k in STATS_COLUMNS[2:]}
            out.append(
                DailyStats(
                    symbol=row["symbol"],
                    date=row["date"],
                    adv_21=v["adv_21"],
                    avg_trade_count_21=v["avg_trade_count_21"],
                    avg_spread_21=v["avg_spread_21"],
                    avg_depth_21=v["avg_depth_21"],
                    vwap_day=v["vwap"],
                    sigma_1=v["daily_volatility"],
                    sigma_2=v["daily_vol_lag1"],
                    sigma_5=v["daily_vol_5d"],
                    trade_high_day=v["trade_high"],
                    trade_low_day=v["trade_low"],
                )
            )
    return out


# ---------------------------------------------------------------------------
# market data bundle


class MarketData:
    """Cleaned bars plus per-day analytics and trailing intraday profiles."""

    def __init__(self, bars, stats=None, window=STATS_WINDOW):
        self.bars = {s: days for s, days in bars.items() if days and not any(b.dropped for b in days.values())}
        self.window = window
        if stats is None:
            stats = {s: compute_daily_stats(days, window) for s, days in self.bars.items()}
        self.stats = {s: {row.date: row for row in rows} for s, rows in stats.items() if s in self.bars}
        self._profiles = {}

    @classmethod
    def from_raw(cls, raw, window=STATS_WINDOW):
        return cls(clean_dataset(raw), window=window)

    @property
    def symbols(self):
        return sorted(self.bars)

    def dates(self, symbol):
        return sorted(self.bars[symbol])

    def all_dates(self):
        return sorted({d for days in self.bars.values() for d in days})

    def series(self, symbol, date):
        try:
            return self.bars[symbol][date]
        except KeyError:
            raise KeyError(f"no bars for {symbol} {date}") from None

    def day_stats(self, symbol, date):
        return self.stats[symbol][date]

    def stats_asof(self, symbol, date):
        """Analytics known before the session opens: the previous day's row when there is one."""
        dates = self.dates(symbol)
        i = dates.index(date)
        return self.stats[symbol][dates[i - 1] if i > 0 else date]

    def universe_stats(self, date):
        return {s: self.stats_asof(s, date) for s in self.symbols if date in self.bars[s]}

    def profile(self, symbol, date):
        """Average volume per session minute over the trailing window before ``date``.

        The first date of a symbol has no history and uses its own volumes.
        """
        key = (symbol, date)
        if key not in self._profiles:
            dates = self.dates(symbol)
            i = dates.index(date)
            hist = dates[max(0, i - self.window) : i] or [date]
            vols = np.stack([np.nan_to_num(self.bars[symbol][d]["trade_volume"], nan=0.0) for d in hist])
            self._profiles[key] = vols.mean(axis=0)
        return self._profiles[key]


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class SynthConfig:
    n_symbols: int = 8
    n_days: int = 60
    base_price: float = 100.0
    daily_vol_range: tuple = (0.01, 0.03)
    adv_range: tuple = (5e5, 5e6)
    u_shape_strength: float = 2.0
    planted_impact: object = None
    seed: int = 0
    start_date: str = "20220103"
    daily_drift: float = 0.0

    def validate(self):
        if self.n_symbols < 1 or self.n_days < 1:
            raise SynthConfigError("n_symbols and n_days must be positive")
        for name in ("daily_vol_range", "adv_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise SynthConfigError(f"{name} must satisfy 0 < lo <= hi, got {(lo, hi)}")
        if self.base_price <= 0:
            raise SynthConfigError("base_price must be positive")
        if self.u_shape_strength < 0:
            raise SynthConfigError("u_shape_strength must be >= 0")


def intraday_shape(strength, n=SESSION_MINUTES):
    """Quadratic U-shaped volume weights summing to one."""
    x = (np.arange(n) - (n - 1) / 2.0) / ((n - 1) / 2.0)
    w = 1.0 + strength * x**2
    return w / w.sum()


def trading_dates(start, n):
    start64 = np.datetime64(f"{start[:4]}-{start[4:6]}-{start[6:]}")
    first = np.busday_offset(start64, 0, roll="forward")
    days = np.busday_offset(first, np.arange(n), roll="forward")
    return [str(d).replace("-", "") for d in days]


def synth_generate(config):
    """Synthetic minute bars ``{symbol: {date: BarSeries}}``.

    Mid log returns are Gaussian with per-day volatility ``sigma_d / sqrt(390)``.
    With ``planted_impact`` set, the minute's signed volume imbalance drives a
    transient response ``g0 * gamma * sum_{l>=1} exp(-l/tau) f(imb_{t-l})``
    added to the returns; ``f(x) = sign(x)|x|^beta``.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    dates = trading_dates(config.start_date, config.n_days)
    shape = intraday_shape(config.u_shape_strength)
    n = SESSION_MINUTES
    sqrt_n = math.sqrt(n)
    out = {}
    imp = config.planted_impact
    for k in range(config.n_symbols):
        symbol = f"S{k:03d}"
        lo, hi = config.daily_vol_range
        sigma_s = rng.uniform(lo, hi)
        lo, hi = config.adv_range
        adv_s = math.exp(rng.uniform(math.log(lo), math.log(hi)))
        price = config.base_price * math.exp(rng.normal(0.0, 0.2))
        half_spread_rel = 1e-4 * rng.uniform(0.5, 2.5)
        trade_size = rng.uniform(80.0, 300.0)
        days = {}
        for date in dates:
            sigma_d = sigma_s * math.exp(rng.normal(0.0, 0.15))
            adv_d = adv_s * math.exp(rng.normal(0.0, 0.2))
            noise = rng.lognormal(-0.5 * 0.3**2, 0.3, n)
            volume = np.round(adv_d * shape * noise)
            imb = rng.uniform(-1.0, 1.0, n)
            imb[volume <= 0] = 0.0
            z = rng.normal(0.0, 1.0, n)
            r = sigma_d / sqrt_n * z + config.daily_drift / n
            if imp is not None:
                f = np.sign(imb) * np.abs(imb) ** imp.beta
                decay = math.exp(-1.0 / imp.tau)
                filt = kernels.exp_filter(f, decay)
                resp = np.zeros(n)
                resp[1:] = imp.g0 * imp.gamma * decay * filt[:-1]
                r = r + resp
            r[0] = rng.normal(0.0, 0.2 * sigma_d)
            mid = price * np.exp(np.cumsum(r))
            price = float(mid[-1])
            prev_mid = np.concatenate([[mid[0]], mid[:-1]])
            half = mid * half_spread_rel
            jitter = rng.uniform(0.0, 1.0, (2, n))
            high = np.maximum(prev_mid, mid) * (1 + half_spread_rel * jitter[0])
            low = np.minimum(prev_mid, mid) * (1 - half_spread_rel * jitter[1])
            vwap = 0.5 * (prev_mid + mid)
            share = np.maximum(0.9, np.abs(imb))
            buy = 0.5 * (share + imb) * volume
            sell = 0.5 * (share - imb) * volume
            unsided = (1.0 - share) * volume
            traded = volume > 0
            nan = np.full(n, np.nan)
            depth = adv_d / n * 0.05
            cols = {
                "trade_count": np.where(traded, np.maximum(1.0, np.round(volume / trade_size)), 0.0),
                "trade_volume": volume,
                "hid_vol": np.round(0.1 * volume),
                "unsided_vol": unsided,
                "sell_vol": sell,
                "buy_vol": buy,
                "bid_price": mid - half,
                "ask_price": mid + half,
                "bid_size": np.round(depth * rng.lognormal(0.0, 0.3, n)),
                "ask_size": np.round(depth * rng.lognormal(0.0, 0.3, n)),
                "trade_last": np.where(traded, mid, nan),
                "trade_high": np.where(traded, high, nan),
                "trade_low": np.where(traded, low, nan),
                "vwap": np.where(traded, vwap, nan),
            }
            days[date] = BarSeries(symbol=symbol, date=date, time=np.arange(n), columns=cols)
        out[symbol] = days
    return out


def bars_equal(a, b):
    """Exact equality of two bar collections (NaN == NaN)."""
    if a.keys() != b.keys():
        return False
    for s in a:
        if a[s].keys() != b[s].keys():
            return False
        for d in a[s]:
            x, y = a[s][d], b[s][d]
            if not np.array_equal(x.time, y.time):
                return False
            for c in VALUE_COLUMNS:
                if not np.array_equal(x[c], y[c], equal_nan=True):
                    return False
    return True

