"""Per-episode execution metrics, winsorised aggregation by strategy, and the
summary / plot-data files built from them."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SCHEMA_PATH = Path(__file__).with_name("schema.json")
METRICS = (
    "arrival_slippage_bps",
    "market_vwap_vs_arrival_bps",
    "vwap_slippage",
    "completion_rate",
    "horizon_usage",
    "action_variability",
    "no_trade_pct",
    "high_rate_favourable_pct",
    "low_rate_unfavourable_pct",
    "total_cost_bps",
    "return_drift_bps",
    "mean_action",
)
SUMMARY_METRICS = ("arrival_slippage_bps", "vwap_slippage", "total_cost_bps", "return_drift_bps", "horizon_usage", "mean_action")
N_PROFILE_BINS = 10
ANATOMY_COLUMNS = ("strategy", "order_id", "t", "action", "q", "q_target", "p_fill", "mid", "vwap", "volume", "impact_bps", "reward")


@dataclass
class MetricRow:
    order_id: str
    strategy: str
    symbol: str
    side: int
    horizon: int
    arrival_slippage_bps: float
    market_vwap_vs_arrival_bps: float
    vwap_slippage: float
    completion_rate: float
    horizon_usage: float
    action_variability: float
    no_trade_pct: float
    high_rate_favourable_pct: float
    low_rate_unfavourable_pct: float
    total_cost_bps: float
    return_drift_bps: float
    mean_action: float
    notional: float
    pathological: bool = False

    def to_dict(self):
        return asdict(self)


def compute_metrics(result, strategy=""):
    """Every execution metric for one finished episode.

    Market VWAP covers the minutes the episode actually ran. Favourable and
    unfavourable periods are side-adjusted: for a buy the mid below the running
    market VWAP is favourable, for a sell above it.
    """
    steps = result.steps
    H = result.horizon
    p0 = result.p0
    side = result.side
    q = np.array([s.q for s in steps], dtype=np.float64)
    pf = np.array([s.p_fill for s in steps], dtype=np.float64)
    vol = np.array([s.volume for s in steps], dtype=np.float64)
    vw = np.array([s.vwap for s in steps], dtype=np.float64)
    mid = np.array([s.mid for s in steps], dtype=np.float64)
    q_tgt = np.array([s.q_target for s in steps], dtype=np.float64)
    acts = np.array([s.action for s in steps], dtype=np.float64)
    rewards = np.array([s.reward for s in steps], dtype=np.float64)

    executed = float(q.sum())
    paid = float(pf @ q)
    traded = np.flatnonzero(q > 0)
    vsum = float(vol.sum())
    mkt_vwap = float(vw @ vol) / vsum if vsum > 0 else math.nan
    pathological = executed <= 0
    avg_fill = paid / result.q0

    run_pv = np.cumsum(vw * vol)
    run_v = np.cumsum(vol)
    with np.errstate(invalid="ignore", divide="ignore"):
        run_vwap = np.where(run_v > 0, run_pv / run_v, np.nan)
    rel = side * (mid - run_vwap)
    fav = np.sum((q > q_tgt) & (rel < 0))
    unfav = np.sum((q < q_tgt) & (rel > 0))
    no_trade = (q.size - traded.size) + (H - q.size)
    fin = acts[np.isfinite(acts)]

    return MetricRow(
        order_id=result.order_id,
        strategy=strategy,
        symbol=result.symbol,
        side=side,
        horizon=H,
        arrival_slippage_bps=math.nan if pathological else 1e4 * side * (avg_fill - p0) / p0,
        market_vwap_vs_arrival_bps=1e4 * (mkt_vwap - p0) / p0,
        vwap_slippage=math.nan if pathological else side * (avg_fill - mkt_vwap),
        completion_rate=executed / result.q0,
        horizon_usage=float(traded[-1] / H) if traded.size else 0.0,
        action_variability=float(np.var(fin)) if fin.size else math.nan,
        no_trade_pct=no_trade / H,
        high_rate_favourable_pct=float(fav) / H,
        low_rate_unfavourable_pct=float(unfav) / H,
        total_cost_bps=-1e4 * float(rewards.sum()) / p0,
        return_drift_bps=1e4 * side * (mid[-1] - p0) / p0 if mid.size else 0.0,
        mean_action=float(fin.mean()) if fin.size else math.nan,
        notional=paid,
        pathological=pathological,
    )


def nearest_rank(sorted_values, p):
    """Nearest-rank percentile: the value at 1-based rank ``ceil(p * n)``."""
    n = len(sorted_values)
    k = min(max(math.ceil(round(p * n, 9)), 1), n)
    return sorted_values[k - 1]


def winsorize(values, p_lo=0.01, p_hi=0.99):
    """Clamp to the nearest-rank ``p_lo`` and ``p_hi`` percentiles, keeping order."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot winsorize an empty sample")
    s = np.sort(x)
    return np.clip(x, nearest_rank(s, p_lo), nearest_rank(s, p_hi))


def mean_se(values):
    """Mean and standard error ``std(ddof=1) / sqrt(n)`` (0 for a single value)."""
    x = np.asarray(values, dtype=np.float64)
    n = x.size
    if n == 0:
        return math.nan, math.nan
    if n == 1:
        return float(x[0]), 0.0
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(n))


def aggregate_summary(rows, p_lo=0.01, p_hi=0.99):
    """One summary dict per strategy, sorted by name.

    Pathological rows are dropped first, then each metric is winsorised within
    the strategy before taking means and standard errors.
    """
    groups = defaultdict(list)
    for r in rows:
        groups[r.strategy].append(r)
    out = []
    for name in sorted(groups):
        g = [r for r in groups[name] if not r.pathological]
        dropped = len(groups[name]) - len(g)
        if not g:
            log.warning("strategy %s has no usable rows; excluded", name)
            continue
        rec = {"strategy": name, "count": len(g), "excluded": dropped, "notional": float(sum(r.notional for r in g))}
        for m in METRICS:
            vals = np.array([getattr(r, m) for r in g], dtype=np.float64)
            vals = vals[np.isfinite(vals)]
            if vals.size:
                mu, se = mean_se(winsorize(vals, p_lo, p_hi))
            else:
                mu, se = math.nan, math.nan
            rec[m] = mu
            rec[m + "_se"] = se
        rec["duration_pct"] = 100.0 * rec["horizon_usage"]
        rec["mean_action_pct"] = 100.0 * rec["mean_action"]
        out.append(rec)
    return out


# ---------------------------------------------------------------------------
# plot data


def action_profile(results_by_strategy, bins=N_PROFILE_BINS):
    """Mean action per horizon-fraction bin, split by whether the price drifted against the order."""
    out = []
    for name in sorted(results_by_strategy):
        acc = defaultdict(list)
        for res in results_by_strategy[name]:
            if not res.steps:
                continue
            drift = res.side * (res.steps[-1].mid - res.p0)
            regime = "adverse" if drift > 0 else "favourable"
            for s in res.steps:
                if math.isfinite(s.action):
                    b = min(int(bins * s.t / res.horizon), bins - 1)
                    acc[(regime, b)].append(s.action)
        for (regime, b) in sorted(acc):
            v = acc[(regime, b)]
            out.append({"strategy": name, "drift": regime, "bin": b, "horizon_frac": (b + 0.5) / bins, "mean_action": float(np.mean(v)), "n": len(v)})
    return out


def cost_decomposition(results_by_strategy):
    """Mean per-episode sum of each reward component (bps of arrival price)."""
    from .engine import COMPONENTS

    out = []
    for name in sorted(results_by_strategy):
        sums = defaultdict(list)
        for res in results_by_strategy[name]:
            tot = np.zeros(len(COMPONENTS))
            for s in res.steps:
                tot += np.asarray(s.components, dtype=np.float64)
            tot *= 1e4 / res.p0
            for c, v in zip(COMPONENTS, tot):
                sums[c].append(v)
        for c in COMPONENTS:
            if sums[c]:
                out.append({"strategy": name, "component": c, "mean_bps": float(np.mean(sums[c])), "n": len(sums[c])})
    return out


def order_anatomy(result, strategy=""):
    """Minute-by-minute record of one order."""
    vals = {"strategy": strategy, "order_id": result.order_id}
    return [
        {**vals, "t": s.t, "action": s.action, "q": s.q, "q_target": s.q_target, "p_fill": s.p_fill, "mid": s.mid,
         "vwap": s.vwap, "volume": s.volume, "impact_bps": s.impact_bps, "reward": s.reward}
        for s in result.steps
    ]


# ---------------------------------------------------------------------------
# output


def _cell(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return "" if not math.isfinite(v) else repr(float(v))
    return v


def write_rows_csv(rows, path, columns=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = columns or (list(rows[0]) if rows else [])
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c)) for c in columns])


def _json_safe(v):
    if isinstance(v, dict):
        return {k: _json_safe(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_json_safe(x) for x in v]
    if isinstance(v, (float, np.floating)):
        return float(v) if math.isfinite(v) else None
    return v


def write_report(out_dir, metric_rows, results_by_strategy=None, anatomy_orders=3):
    """summary.csv, summary.json, metrics.csv and plotdata/*.csv under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = aggregate_summary(metric_rows)
    cols = ["strategy", "count", "excluded", "notional", "duration_pct", "mean_action_pct"]
    for m in METRICS:
        cols += [m, m + "_se"]
    write_rows_csv(summary, out / "summary.csv", cols)
    (out / "summary.json").write_text(json.dumps(_json_safe(summary), sort_keys=True, indent=1) + "\n")
    mcols = [f.name for f in fields(MetricRow)]
    ordered = sorted(metric_rows, key=lambda r: r.strategy)
    write_rows_csv([r.to_dict() for r in ordered], out / "metrics.csv", mcols)
    if results_by_strategy:
        pd = out / "plotdata"
        write_rows_csv(action_profile(results_by_strategy), pd / "action_profile.csv", ["strategy", "drift", "bin", "horizon_frac", "mean_action", "n"])
        write_rows_csv(cost_decomposition(results_by_strategy), pd / "cost_decomposition.csv", ["strategy", "component", "mean_bps", "n"])
        anat = []
        for name in sorted(results_by_strategy):
            for res in sorted(results_by_strategy[name], key=lambda r: r.order_id)[:anatomy_orders]:
                anat += order_anatomy(res, name)
        write_rows_csv(anat, pd / "order_anatomy.csv", list(ANATOMY_COLUMNS))
    return summary


def load_schema():
    return json.loads(SCHEMA_PATH.read_text())
