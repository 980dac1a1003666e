"""MAP-Elites over policy parameters, with cells given by the liquidity and
volatility regime of the orders a policy is evaluated on."""

from __future__ import annotations

import csv
import logging
import math
import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import run_episode
from .ppo import RunningNorm, load_checkpoint, save_checkpoint
from .seeding import derive_seed, rng_for
from .strategies import NetworkPolicy

log = logging.getLogger(__name__)

MANIFEST_COLUMNS = ("cell_i", "cell_j", "quality", "vs_baseline_pct", "n_evals")


class EmptyArchiveError(RuntimeError):
    pass


class CellUnevaluable(ValueError):
    pass


@dataclass(frozen=True)
class Descriptor:
    liq: float
    vol: float
    degenerate: bool = False

    def __post_init__(self):
        if not (0.0 <= self.liq <= 1.0 and 0.0 <= self.vol <= 1.0):
            raise ValueError(f"descriptor {self.liq, self.vol} outside [0, 1]^2")


def compute_descriptor(symbol, universe):
    """Quantile ranks of the symbol's ADV and daily vol within ``universe``.

    ``universe`` maps symbol to its (as-of) daily stats. The rank counts names
    with a value ``<=`` the symbol's, so the top name gets exactly 1.
    """
    if not universe:
        raise ValueError("empty universe")
    if symbol not in universe:
        raise KeyError(f"{symbol} not in the universe")
    adv = np.array([s.adv_21 for s in universe.values()])
    vol = np.array([s.sigma_1 for s in universe.values()])
    me = universe[symbol]
    n = len(universe)
    degenerate = bool(np.all(adv == adv[0]) or np.all(vol == vol[0]))
    return Descriptor(
        liq=float(np.sum(adv <= me.adv_21)) / n,
        vol=float(np.sum(vol <= me.sigma_1)) / n,
        degenerate=degenerate and n > 1,
    )


def cell_index(desc, dims=(3, 3)):
    """Grid cell for a descriptor: bins ``(k/n, (k+1)/n]`` with 0 in the first bin."""

    def one(x, n):
        k = math.ceil(x * n - 1e-9) - 1
        return min(max(k, 0), n - 1)

    return one(desc.liq, dims[0]), one(desc.vol, dims[1])


def neighbours(cell, dims):
    i, j = cell
    out = []
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            a, b = i + di, j + dj
            if 0 <= a < dims[0] and 0 <= b < dims[1]:
                out.append((a, b))
    return out


def order_cells(orders, market, dims=(3, 3)):
    """Group orders by the cell of their symbol on their date."""
    cache = {}
    out = {}
    for o in orders:
        if o.date not in cache:
            cache[o.date] = market.universe_stats(o.date)
        cell = cell_index(compute_descriptor(o.symbol, cache[o.date]), dims)
        out.setdefault(cell, []).append(o)
    return out


# ---------------------------------------------------------------------------
# archive


@dataclass
class Elite:
    params: np.ndarray
    quality: float
    provenance: dict


@dataclass
class Archive:
    dims: tuple = (3, 3)
    cells: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    n_evals: int = 0
    n_init_evals: int = 0
    evals_by_cell: dict = field(default_factory=dict)

    def coverage(self):
        return len(self.cells)

    def occupied(self):
        return sorted(self.cells)

    def quality_grid(self):
        g = np.full(self.dims, np.nan)
        for (i, j), e in self.cells.items():
            g[i, j] = e.quality
        return g

    def snapshot(self):
        return {c: e.quality for c, e in sorted(self.cells.items())}


def archive_update(archive, params, quality, where, provenance=None):
    """Insert into an empty cell, or replace the incumbent only on strictly higher quality.

    ``where`` is a :class:`Descriptor` or a cell tuple. Returns True if the archive changed.
    """
    if not math.isfinite(quality):
        raise ValueError("quality must be finite")
    cell = cell_index(where, archive.dims) if isinstance(where, Descriptor) else tuple(where)
    inc = archive.cells.get(cell)
    if inc is not None and not quality > inc.quality:
        return False
    archive.cells[cell] = Elite(np.array(params, copy=True), float(quality), dict(provenance or {}))
    return True


def mutate_params(parent, sigma, rng, index=None):
    """Parent plus element-wise N(0, sigma^2) noise, optionally only at ``index``."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    child = np.array(parent, dtype=np.float64, copy=True)
    if index is None:
        child += rng.normal(0.0, sigma, child.shape)
    else:
        child[index] += rng.normal(0.0, sigma, len(index))
    return child


def evaluate_quality(policy, orders, market, seed=0, weights=None):
    """Negative mean total cost (bps) of ``policy`` over ``orders``."""
    if not orders:
        raise CellUnevaluable("no orders to evaluate on")
    costs = [run_episode(policy, o, market, seed=seed, weights=weights).summary["total_cost_bps"] for o in orders]
    return -float(np.mean(costs))


# ---------------------------------------------------------------------------
# search


@dataclass
class QDConfig:
    iterations: int = 500
    children: int = 256
    sigma: float = 0.01
    eval_episodes: int = 8
    dims: tuple = (3, 3)
    seed: int = 0
    workers: int = 1

    def validate(self):
        if self.iterations < 1 or self.children < 1 or self.eval_episodes < 1:
            raise ValueError("iterations, children and eval_episodes must be positive")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


@dataclass
class QDResult:
    archive: Archive
    net: object
    norm: RunningNorm
    seed_params: np.ndarray


_W = {}


def _w_init(net, norm, market, weights):
    _W.update(net=net, norm=norm, market=market, weights=weights)


def _w_eval(job):
    params, orders, seed = job
    pol = NetworkPolicy(_W["net"], params, _W["norm"])
    return evaluate_quality(pol, orders, _W["market"], seed, _W["weights"])


def fit_norm(orders, market, n=64, weights=None, seed=0):
    """Freeze observation moments from on-schedule (a = 0) rollouts."""
    from .engine import reset, step

    norm = RunningNorm.create()
    rng = np.random.default_rng(seed)
    pick = [orders[i] for i in sorted(rng.choice(len(orders), min(n, len(orders)), replace=False))]
    for o in pick:
        state, obs = reset(o, market=market, weights=weights)
        rows = [obs]
        while not state.done:
            state, obs, _, _, _ = step(state, action=0.0)
            rows.append(obs)
        norm.update(np.array(rows))
    norm.frozen = True
    return norm


def run_map_elites(net, seed_params, norm, config, orders, market, weights=None):
    """Seed every cell that has orders with the seed policy, then evolve.

    Each generation draws parents uniformly from occupied cells, assigns the
    children round-robin to occupied and adjacent cells, evaluates each child
    on that cell's episode sample for the iteration (shared by siblings), and
    applies archive updates in (cell, child) order.
    """
    config.validate()
    dims = tuple(config.dims)
    pools = order_cells(orders, market, dims)
    pools = {c: sorted(p, key=lambda o: o.id) for c, p in pools.items()}
    mut_index = net.policy_slice()
    archive = Archive(dims=dims)
    pool = None
    if config.workers > 1:
        pool = ProcessPoolExecutor(config.workers, mp.get_context("fork"), initializer=_w_init, initargs=(net, norm, market, weights))
    else:
        _w_init(net, norm, market, weights)

    def run(jobs):
        if pool is None:
            return [_w_eval(j) for j in jobs]
        return list(pool.map(_w_eval, jobs, chunksize=max(1, len(jobs) // (4 * config.workers))))

    def sample(cell, it):
        p = pools[cell]
        r = rng_for(config.seed, "qd-orders", it, *cell)
        k = min(config.eval_episodes, len(p))
        return [p[i] for i in sorted(r.choice(len(p), k, replace=False))]

    try:
        cells = sorted(pools)
        ep_seed = derive_seed(config.seed, "qd-episodes", -1)
        qs = run([(seed_params, sample(c, -1), ep_seed) for c in cells])
        for c, q in zip(cells, qs):
            archive_update(archive, seed_params, q, c, {"iteration": -1, "source": "seed"})
        archive.n_init_evals = len(cells)
        if not archive.cells:
            raise EmptyArchiveError("no cell could be seeded; check the order pools")
        archive.history.append(archive.snapshot())

        for it in range(config.iterations):
            rng = rng_for(config.seed, "qd", it)
            occ = archive.occupied()
            targets = sorted({n for c in occ for n in neighbours(c, dims) if n in pools})
            ep_seed = derive_seed(config.seed, "qd-episodes", it)
            samples = {c: sample(c, it) for c in targets}
            jobs, meta = [], []
            for k in range(config.children):
                parent = occ[rng.integers(len(occ))]
                child = mutate_params(archive.cells[parent].params, config.sigma, rng, mut_index)
                cell = targets[k % len(targets)]
                jobs.append((child, samples[cell], ep_seed))
                meta.append((cell, k, parent))
            qs = run(jobs)
            archive.n_evals += len(jobs)
            for cell, _, _ in meta:
                archive.evals_by_cell[cell] = archive.evals_by_cell.get(cell, 0) + 1
            for (cell, k, parent), (child, _, _), q in sorted(zip(meta, jobs, qs), key=lambda z: (z[0][0], z[0][1])):
                archive_update(archive, child, q, cell, {"iteration": it, "child": k, "parent": list(parent)})
            archive.history.append(archive.snapshot())
            if it % 10 == 0 or it == config.iterations - 1:
                log.info("qd iter %d coverage %d best %s", it, archive.coverage(), np.nanmax(archive.quality_grid()))
    finally:
        if pool is not None:
            pool.shutdown()
    return QDResult(archive, net, norm, np.array(seed_params, copy=True))


def specialist_report(result, orders, market, weights=None, seed=0, baseline=None):
    """Held-out table: each elite vs the seed policy on the cell's own orders.

    ``vs_baseline_pct = 100 * (Q_cell - Q_base) / |Q_base|``.
    """
    archive = result.archive
    pools = order_cells(orders, market, archive.dims)
    if baseline is None:
        baseline = NetworkPolicy(result.net, result.seed_params, result.norm)
    rows = []
    for cell in archive.occupied():
        p = pools.get(cell, [])
        row = {"cell_i": cell[0], "cell_j": cell[1], "train_quality": archive.cells[cell].quality, "n_test": len(p)}
        if p:
            q = evaluate_quality(NetworkPolicy(result.net, archive.cells[cell].params, result.norm), p, market, seed, weights)
            qb = evaluate_quality(baseline, p, market, seed, weights)
            row.update(quality=q, baseline_quality=qb, vs_baseline_pct=100.0 * (q - qb) / abs(qb) if qb != 0 else math.nan)
        else:
            row.update(quality=math.nan, baseline_quality=math.nan, vs_baseline_pct=math.nan)
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# archive store


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def save_archive(result, out_dir, report=None):
    out = Path(out_dir)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    archive = result.archive
    vs = {(r["cell_i"], r["cell_j"]): r.get("vs_baseline_pct", math.nan) for r in report or []}
    with (out / "manifest.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for cell in archive.occupied():
            e = archive.cells[cell]
            save_checkpoint(out / "cells" / f"cell_{cell[0]}_{cell[1]}.json", result.net, e.params, result.norm)
            w.writerow([cell[0], cell[1], _fmt(e.quality), _fmt(vs.get(cell, math.nan)), archive.evals_by_cell.get(cell, 0)])
    with (out / "surface.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("iteration", "cell_i", "cell_j", "fitness"))
        for it, snap in enumerate(archive.history):
            for (i, j), q in snap.items():
                w.writerow([it - 1, i, j, _fmt(q)])
    if report:
        cols = list(report[0])
        with (out / "report.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in report:
                w.writerow([_fmt(r[c]) for c in cols])


def load_elite(archive_dir, cell):
    path = Path(archive_dir) / "cells" / f"cell_{cell[0]}_{cell[1]}.json"
    if not path.exists():
        raise FileNotFoundError(f"no elite for cell {cell} in {archive_dir}")
    ck = load_checkpoint(path)
    return NetworkPolicy(ck.net, ck.params, ck.norm)

