"""Transient (propagator) impact: power-law instant impact, exponential kernel,
recursive impact state, impact-adjusted fills, and calibration."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar

from . import kernels

log = logging.getLogger(__name__)

TAU_BOUNDS = (0.5, 180.0)
FORM_BETA = {"linear": 1.0, "sqrt": 0.5}
RETAIN_R2 = 0.02
LAG_GRID = (5, 10, 20, 30)
BPS = 1e-4

STORE_COLUMNS = ("symbol", "form", "gamma", "beta", "g0", "tau", "r2_bar", "retained")


class ImpactDomainError(ValueError):
    pass


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class ImpactParams:
    g0: float
    tau: float
    form: str = "sqrt"
    gamma: float = 1.0
    r2_bar: float = math.nan

    def __post_init__(self):
        if self.form not in FORM_BETA:
            raise ValueError(f"unknown impact form {self.form!r}")
        if self.g0 < 0:
            raise ValueError("g0 must be >= 0")
        if not TAU_BOUNDS[0] <= self.tau <= TAU_BOUNDS[1]:
            raise ValueError(f"tau {self.tau} outside {TAU_BOUNDS}")

    @property
    def beta(self):
        return FORM_BETA[self.form]

    @property
    def decay(self):
        return math.exp(-1.0 / self.tau)


def instant_impact(q, V, params):
    """gamma * (q / V) ** beta."""
    if V <= 0:
        raise ImpactDomainError("market volume must be positive")
    if q < 0:
        raise ImpactDomainError("trade size must be non-negative")
    if q == 0:
        return 0.0
    return params.gamma * (q / V) ** params.beta


def kernel_weight(lag, params):
    return params.g0 * math.exp(-lag / params.tau)


def fill_price(p_vwap, side, impact):
    return p_vwap * (1.0 + side * impact)


@dataclass(frozen=True)
class ImpactState:
    params: ImpactParams
    accumulator: float = 0.0
    last_update_minute: int = -1
    last_instant: float = 0.0


def propagate_state(state, trade, advance=1):
    """Decay the accumulator by ``advance`` minutes, then add the new trade at lag 0.

    ``trade`` is ``(q, V, sign)``; ``q == 0`` is a pure decay step and ``V``
    is not consulted.
    """
    q, V, sign = trade
    if advance < 0:
        raise ValueError("advance must be >= 0")
    p = state.params
    acc = state.accumulator * math.exp(-advance / p.tau)
    inst = 0.0
    if q > 0:
        inst = p.g0 * sign * instant_impact(q, V, p)
        acc += inst
    return ImpactState(
        params=p,
        accumulator=acc,
        last_update_minute=state.last_update_minute + advance,
        last_instant=inst,
    )


def impact_path(q, V, sign, params, advance=1):
    """Accumulator after each trade of a sequence, vectorised."""
    q = np.asarray(q, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    sign = np.broadcast_to(np.asarray(sign, dtype=np.float64), q.shape)
    if np.any((q > 0) & (V <= 0)):
        raise ImpactDomainError("market volume must be positive where trading")
    with np.errstate(divide="ignore", invalid="ignore"):
        part = np.where(q > 0, q / np.where(V > 0, V, 1.0), 0.0)
    contrib = params.g0 * params.gamma * sign * part**params.beta
    return kernels.impact_accumulate(contrib, advance, params.tau)


# ---------------------------------------------------------------------------
# calibration


def impact_transform(x, form):
    """Signed power transform sign(x)|x|^beta; NaN maps to 0."""
    x = np.nan_to_num(np.asarray(x, dtype=np.float64), nan=0.0)
    return np.sign(x) * np.abs(x) ** FORM_BETA[form]


@dataclass
class CalibrationFit:
    params: ImpactParams
    fold_r2: list
    max_lag: int
    n_obs: int
    flags: list = field(default_factory=list)

    @property
    def r2_bar(self):
        return self.params.r2_bar


def _as_segments(x):
    if isinstance(x, np.ndarray) and x.ndim == 1:
        return [x]
    if isinstance(x, (list, tuple)) and x and np.ndim(x[0]) == 0:
        return [np.asarray(x, dtype=np.float64)]
    return [np.asarray(s, dtype=np.float64) for s in x]


def _log_tau_grid(n=64):
    return np.exp(np.linspace(math.log(TAU_BOUNDS[0]), math.log(TAU_BOUNDS[1]), n))


class _Gram:
    """Sufficient statistics of r ~ g0 * (M @ w(tau)) over a set of rows."""

    def __init__(self, M, y):
        self.A = M.T @ M
        self.b = M.T @ y
        self.yy = float(y @ y)
        self.L = M.shape[1]
        self.lags = np.arange(1, self.L + 1, dtype=np.float64)

    def weights(self, tau):
        return np.exp(-self.lags / tau)

    def solve(self, tau):
        w = self.weights(tau)
        sxx = float(w @ self.A @ w)
        sxy = float(w @ self.b)
        g0 = max(0.0, sxy / sxx) if sxx > 0 else 0.0
        sse = self.yy - 2.0 * g0 * sxy + g0 * g0 * sxx
        return g0, sse


def _fit_tau(gram, grid):
    sse = np.array([gram.solve(t)[1] for t in grid])
    i = int(np.argmin(sse))
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, grid.size - 1)]
    res = minimize_scalar(
        lambda u: gram.solve(math.exp(u))[1],
        bounds=(math.log(lo), math.log(hi)),
        method="bounded",
        options={"xatol": 1e-6},
    )
    tau = math.exp(res.x) if res.fun <= sse[i] else float(grid[i])
    tau = min(max(tau, TAU_BOUNDS[0]), TAU_BOUNDS[1])
    return gram.solve(tau)[0], tau


def _r2(y, pred):
    sst = float(np.sum((y - y.mean()) ** 2))
    if sst <= 0:
        return 0.0
    return 1.0 - float(np.sum((y - pred) ** 2)) / sst


def calibrate_propagator(returns, signed_participation, form="sqrt", max_lag=20, folds=5, tau_grid=None):
    """Fit ``r_t = g0 * sum_{l=1..L} exp(-l/tau) f(x_{t-l})`` with g0 >= 0, tau in [0.5, 180].

    ``returns`` and ``signed_participation`` are aligned 1-D arrays or lists of
    aligned per-session arrays; lags never cross a session boundary. NaN
    returns are left out of the regression, NaN participation counts as no
    trade. gamma is fixed to 1, so the reported g0 carries the product.
    Out-of-fold R^2 uses forward-chaining contiguous folds.
    """
    if folds < 2:
        raise ValueError("need at least 2 folds")
    rs = _as_segments(returns)
    xs = _as_segments(signed_participation)
    if len(rs) != len(xs) or any(a.shape != b.shape for a, b in zip(rs, xs)):
        raise ValueError("returns and participation must be aligned")
    r = np.concatenate(rs)
    f = impact_transform(np.concatenate(xs), form)
    seg = kernels.segment_starts([a.size for a in rs])
    M = kernels.lag_matrix(f, max_lag, seg)
    ok = np.isfinite(r)
    y, M = r[ok], M[ok]
    n = y.size
    if n < (folds + 1) * max(max_lag, 2):
        raise CalibrationError(f"too few observations ({n}) for {folds} folds at L={max_lag}")
    if float(np.var(y)) == 0.0 or not np.any(M):
        raise CalibrationError("degenerate input: zero variance")

    grid = _log_tau_grid() if tau_grid is None else np.asarray(tau_grid, dtype=np.float64)
    edges = np.linspace(0, n, folds + 2).astype(int)
    fold_r2 = []
    for k in range(1, folds + 1):
        tr = slice(0, edges[k])
        te = slice(edges[k], edges[k + 1])
        g0, tau = _fit_tau(_Gram(M[tr], y[tr]), grid)
        pred = g0 * (M[te] @ np.exp(-np.arange(1, max_lag + 1) / tau))
        fold_r2.append(_r2(y[te], pred))

    g0, tau = _fit_tau(_Gram(M, y), grid)
    flags = []
    if tau <= TAU_BOUNDS[0] * (1 + 1e-6) or tau >= TAU_BOUNDS[1] * (1 - 1e-6):
        flags.append("tau_at_bound")
    if g0 == 0.0:
        flags.append("g0_at_bound")
    if len(flags) == 2:
        log.warning("calibration hit both bounds (form=%s, L=%d)", form, max_lag)
    params = ImpactParams(g0=g0, tau=tau, form=form, gamma=1.0, r2_bar=float(np.mean(fold_r2)))
    return CalibrationFit(params=params, fold_r2=fold_r2, max_lag=max_lag, n_obs=n, flags=flags)


def impact_inputs_from_bars(days):
    """Per-session (returns in bps, signed volume imbalance) from cleaned bars."""
    rets, parts = [], []
    for date in sorted(days):
        s = days[date]
        rets.append(s.mid_returns() / BPS)
        parts.append(np.nan_to_num(s.trade_imbalance, nan=0.0))
    return rets, parts


@dataclass
class CalibrationReport:
    fits: dict
    mean_r2: dict
    winner: str
    chosen: dict
    best_lag: dict
    retained: list
    warnings: list = field(default_factory=list)

    def lag_study_rows(self):
        rows = []
        for (form, L), v in sorted(self.mean_r2.items()):
            rows.append({"form": form, "max_lag": L, "mean_r2": v})
        return rows


def _calibrate_one(args):
    symbol, rets, parts, forms, lags, folds = args
    out = {}
    for form in forms:
        for L in lags:
            try:
                out[(form, L)] = calibrate_propagator(rets, parts, form=form, max_lag=L, folds=folds)
            except CalibrationError as exc:
                log.warning("%s %s L=%d: %s", symbol, form, L, exc)
    return symbol, out


def compare_impact_forms(
    dataset,
    lags=LAG_GRID,
    forms=("linear", "sqrt"),
    folds=5,
    threshold=RETAIN_R2,
    return_unit=1.0,
    workers=1,
):
    """Calibrate every symbol for each (form, max lag) and pick a universe-wide form.

    ``dataset`` maps symbol -> (returns, participation) in the layout accepted by
    :func:`calibrate_propagator`. ``return_unit`` is the size of one return unit
    as a price fraction (``1e-4`` for bps); chosen ``g0`` values are converted
    to price fractions with it.
    """
    if len(dataset) < 2:
        raise ValueError("need at least two symbols")
    jobs = [(s, r, x, tuple(forms), tuple(lags), folds) for s, (r, x) in sorted(dataset.items())]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_calibrate_one, jobs))
    else:
        results = [_calibrate_one(j) for j in jobs]
    fits = dict(results)

    mean_r2 = {}
    for form in forms:
        for L in lags:
            vals = [f[(form, L)].r2_bar for f in fits.values() if (form, L) in f]
            mean_r2[(form, L)] = float(np.mean(vals)) if vals else math.nan
    by_form = {form: np.nanmean([mean_r2[(form, L)] for L in lags]) for form in forms}
    winner = max(forms, key=lambda fm: by_form[fm])

    chosen, best_lag, retained, warnings_ = {}, {}, [], []
    for symbol, f in fits.items():
        cands = [(L, f[(winner, L)]) for L in lags if (winner, L) in f]
        if not cands:
            continue
        L, fit = max(cands, key=lambda c: c[1].r2_bar)
        p = fit.params
        chosen[symbol] = replace(p, g0=p.g0 * return_unit)
        best_lag[symbol] = L
        if p.r2_bar > threshold:
            retained.append(symbol)
    if not retained:
        msg = f"no symbol has mean out-of-sample R^2 above {threshold}"
        log.warning(msg)
        warnings_.append(msg)
    return CalibrationReport(
        fits=fits,
        mean_r2=mean_r2,
        winner=winner,
        chosen=chosen,
        best_lag=best_lag,
        retained=sorted(retained),
        warnings=warnings_,
    )


# ---------------------------------------------------------------------------
# calibration store


@dataclass(frozen=True)
class CalibrationEntry:
    symbol: str
    params: ImpactParams
    retained: bool


def write_calibration_store(path, chosen, retained):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keep = set(retained)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STORE_COLUMNS)
        for symbol in sorted(chosen):
            p = chosen[symbol]
            w.writerow(
                [symbol, p.form, repr(p.gamma), repr(p.beta), repr(p.g0), repr(p.tau), repr(p.r2_bar), int(symbol in keep)]
            )


def read_calibration_store(path):
    out = {}
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != STORE_COLUMNS:
            raise ValueError(f"{path}: expected columns {list(STORE_COLUMNS)}")
        for row in reader:
            params = ImpactParams(
                g0=float(row["g0"]),
                tau=float(row["tau"]),
                form=row["form"],
                gamma=float(row["gamma"]),
                r2_bar=float(row["r2_bar"]),
            )
            out[row["symbol"]] = CalibrationEntry(row["symbol"], params, row["retained"].strip() == "1")
    return out


def store_from_report(report):
    keep = set(report.retained)
    return {s: CalibrationEntry(s, p, s in keep) for s, p in report.chosen.items()}
