"""``geo-exec`` command line: synth, calibrate, gen-orders, run, train-ppo,
map-elites, evaluate, report.

Exit status is 0 on success, 2 for usage errors (bad flags, bad config keys)
and 1 for missing inputs or failed runs.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .engine import EpisodeResult, run_episodes_vectorized
from .evalreport import compute_metrics, write_report
from .impact import BPS, compare_impact_forms, impact_inputs_from_bars, read_calibration_store, write_calibration_store
from .mapelites import fit_norm, run_map_elites, save_archive, specialist_report
from .marketdata import MarketData, load_minute_bars, synth_generate, write_daily_stats, write_minute_bars
from .orders import CalendarError, OrderGenConfig, check_calendar_separation, generate_orders, read_orders, write_orders
from .ppo import make_env_factory, save_checkpoint, train_ppo, write_training_log
from .seeding import derive_seed
from .strategies import make_policy

log = logging.getLogger("geo_exec")


class InputMissing(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _need(path, what):
    if not path:
        raise InputMissing(f"no {what} given")
    p = Path(path)
    if not p.exists():
        raise InputMissing(f"{what} not found: {p}")
    return p


def _out(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _provenance(out, cfg, args):
    (out / "config.json").write_text(cfg.dumps())
    (out / "seed.txt").write_text(f"{cfg.seed}\n")


def _market(args, cfg):
    return MarketData.from_raw(load_minute_bars(_need(args.data or cfg.data.bars, "bar data directory")))


def _orders(args):
    return read_orders(_need(args.orders, "orders file"))


def _workers(args, cfg):
    n = args.workers if args.workers is not None else cfg.workers
    return n if n and n > 0 else (os.cpu_count() or 1)


def _write_results(results, path):
    with Path(path).open("w") as fh:
        for r in results:
            fh.write(r.to_json() + "\n")


def _read_results(path):
    with Path(path).open() as fh:
        return [EpisodeResult.from_json(line) for line in fh if line.strip()]


def _default_windows(cfg, market):
    """Train/test windows from the config, or a 70/30 split of the calendar."""
    o = cfg.orders
    if o.train_from and o.train_to and o.test_from and o.test_to:
        return (o.train_from, o.train_to), (o.test_from, o.test_to)
    dates = market.all_dates()
    if len(dates) < 3:
        raise ValueError("need at least three trading dates to split train and test")
    k = max(2, int(0.7 * len(dates)))
    return (dates[1], dates[k - 1]), (dates[k], dates[-1])


def _run_strategy(name, orders, market, cfg, args, checkpoint=None, archive=None):
    policy = make_policy(name, checkpoint=checkpoint, archive=archive)
    results = run_episodes_vectorized(policy, orders, market, n_workers=_workers(args, cfg), seed=derive_seed(cfg.seed, "run"), weights=cfg.reward)
    failed = [r for r in results if r.error]
    for r in failed:
        log.error("%s: %s", r.order_id, r.error)
    return [r for r in results if not r.error], len(failed)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, cfg):
    out = _out(args)
    sc = dataclasses.replace(cfg.synth, seed=derive_seed(cfg.seed, "synth"))
    raw = synth_generate(sc)
    write_minute_bars(raw, out / "bars")
    market = MarketData.from_raw(raw)
    write_daily_stats([market.stats[sym][d] for sym in sorted(market.stats) for d in sorted(market.stats[sym])], out / "stats.csv")
    _provenance(out, cfg, args)
    log.info("wrote %d symbols x %d days to %s", len(raw), sc.n_days, out / "bars")
    return 0


def cmd_calibrate(args, cfg):
    market = _market(args, cfg)
    out = _out(args)
    c = cfg.calibration
    dataset = {s: impact_inputs_from_bars(market.bars[s]) for s in market.symbols}
    report = compare_impact_forms(dataset, lags=c.lags, forms=c.forms, folds=c.folds, threshold=c.threshold, return_unit=BPS, workers=_workers(args, cfg))
    write_calibration_store(out / "calibration.csv", report.chosen, report.retained)
    with (out / "lag_study.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("form", "max_lag", "mean_r2"))
        for row in report.lag_study_rows():
            w.writerow((row["form"], row["max_lag"], repr(row["mean_r2"])))
    (out / "winner.txt").write_text(report.winner + "\n")
    _provenance(out, cfg, args)
    log.info("form %s; %d/%d symbols retained", report.winner, len(report.retained), len(dataset))
    return 0


def cmd_gen_orders(args, cfg):
    market = _market(args, cfg)
    store = read_calibration_store(_need(args.calibration or cfg.data.calibration, "calibration store"))
    out = _out(args)
    train_w, test_w = _default_windows(cfg, market)
    check_calendar_separation(train_w, test_w)
    o = cfg.orders
    common = dict(ehv_pct_range=o.ehv_pct_range, horizon_range=o.horizon_range, side_prob=o.side_prob)
    train = generate_orders(OrderGenConfig(o.n_train, *train_w, seed=derive_seed(cfg.seed, "orders", "train"), **common), market, store)
    test = generate_orders(OrderGenConfig(o.n_test, *test_w, seed=derive_seed(cfg.seed, "orders", "test"), **common), market, store)
    test = [dataclasses.replace(x, id="T" + x.id[1:]) for x in test]
    write_orders(train, out / "orders_train.csv")
    write_orders(test, out / "orders_test.csv")
    _provenance(out, cfg, args)
    return 0


def cmd_run(args, cfg):
    if not args.strategy:
        raise UsageError("run needs --strategy")
    market = _market(args, cfg)
    orders = _orders(args)
    out = _out(args)
    results, n_failed = _run_strategy(args.strategy, orders, market, cfg, args, args.checkpoint, args.archive)
    _write_results(results, out / "results.jsonl")
    rows = [compute_metrics(r, args.strategy) for r in results]
    write_report(out, rows)
    _provenance(out, cfg, args)
    return 1 if n_failed and not results else 0


def cmd_train_ppo(args, cfg):
    market = _market(args, cfg)
    orders = _orders(args)
    out = _out(args)
    tc = dataclasses.replace(cfg.ppo, seed=derive_seed(cfg.seed, "ppo") % 2**32)
    res = train_ppo(make_env_factory(market, cfg.reward), orders, tc)
    save_checkpoint(out / "checkpoint.json", res.net, res.params, res.norm, tc)
    write_training_log(res.log, out / "training_log.csv")
    _provenance(out, cfg, args)
    if res.aborted:
        log.error("training diverged; saved the last good parameters")
        return 1
    return 0


def cmd_map_elites(args, cfg):
    from .ppo import load_checkpoint

    market = _market(args, cfg)
    orders = _orders(args)
    out = _out(args)
    qd = dataclasses.replace(cfg.qd, seed=derive_seed(cfg.seed, "qd"), workers=_workers(args, cfg))
    if args.checkpoint:
        ck = load_checkpoint(_need(args.checkpoint, "checkpoint"))
        net, params, norm = ck.net, ck.params, ck.norm
    else:
        net = cfg.ppo.make_net()
        params = net.init(np.random.default_rng(derive_seed(cfg.seed, "qd-seed-policy")))
        norm = fit_norm(orders, market, weights=cfg.reward)
    result = run_map_elites(net, params, norm, qd, orders, market, weights=cfg.reward)
    report = None
    if args.test_orders:
        test = read_orders(_need(args.test_orders, "test orders file"))
        report = specialist_report(result, test, market, weights=cfg.reward, seed=derive_seed(cfg.seed, "qd-report"))
    save_archive(result, out, report)
    _provenance(out, cfg, args)
    return 0


def cmd_evaluate(args, cfg):
    o = cfg.orders
    if not (o.train_from and o.train_to and o.test_from and o.test_to):
        raise CalendarError("evaluate needs explicit [orders] train_from/train_to/test_from/test_to windows")
    check_calendar_separation((o.train_from, o.train_to), (o.test_from, o.test_to))
    market = _market(args, cfg)
    orders = _orders(args)
    stray = sorted({x.date for x in orders if not o.test_from <= x.date <= o.test_to})
    if stray:
        raise CalendarError(f"evaluation orders dated outside the test window: {stray[:3]}")
    out = _out(args)
    names = list(cfg.evaluate.strategies)
    if args.checkpoint and "ppo" not in names:
        names.append("ppo")
    rows, by_strategy = [], {}
    (out / "results").mkdir(exist_ok=True)
    for name in names:
        results, _ = _run_strategy(name, orders, market, cfg, args, args.checkpoint, args.archive)
        _write_results(results, out / "results" / f"{name.replace(':', '_').replace(',', '_')}.jsonl")
        by_strategy[name] = results
        rows += [compute_metrics(r, name) for r in results]
    write_report(out, rows, by_strategy)
    _provenance(out, cfg, args)
    return 0


def cmd_report(args, cfg):
    src = _need(args.results, "results path")
    files = [src] if src.is_file() else sorted(src.glob("*.jsonl"))
    if not files:
        raise InputMissing(f"no *.jsonl results under {src}")
    out = _out(args)
    rows, by_strategy = [], {}
    for f in files:
        name = f.parent.name if f.stem == "results" else f.stem
        res = _read_results(f)
        by_strategy[name] = res
        rows += [compute_metrics(r, name) for r in res]
    write_report(out, rows, by_strategy)
    _provenance(out, cfg, args)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "calibrate": cmd_calibrate,
    "gen-orders": cmd_gen_orders,
    "run": cmd_run,
    "train-ppo": cmd_train_ppo,
    "map-elites": cmd_map_elites,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


class UsageError(ValueError):
    pass


def build_parser():
    p = argparse.ArgumentParser(prog="geo-exec", description="Execution backtesting: data, impact calibration, policies, evaluation.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="TOML run configuration")
        s.add_argument("--out", default="out", help="output directory (default: ./out)")
        s.add_argument("--seed", type=int, help="global seed (overrides the config)")
        s.add_argument("--workers", type=int, help="worker processes (default: logical cores)")
        if name != "synth":
            s.add_argument("--data", help="bar data directory (SYMBOL/DATE.csv)")
        if name == "gen-orders":
            s.add_argument("--calibration", help="calibration store CSV")
        if name in ("run", "train-ppo", "map-elites", "evaluate"):
            s.add_argument("--orders", help="orders CSV")
        if name in ("run", "map-elites", "evaluate"):
            s.add_argument("--checkpoint", help="PPO checkpoint JSON")
        if name in ("run", "evaluate"):
            s.add_argument("--archive", help="MAP-Elites archive directory (for elite:i,j strategies)")
        if name == "run":
            s.add_argument("--strategy", help="twap, vwap, pov, random, ppo or elite:i,j")
        if name == "map-elites":
            s.add_argument("--test-orders", help="held-out orders for the specialist table")
        if name == "report":
            s.add_argument("--results", help="results.jsonl file or a directory of them")
    return p


def main(argv=None):
    logging.basicConfig(level=os.environ.get("GEO_EXEC_LOG", "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = cfgmod.load_config(args.config)
    except FileNotFoundError as exc:
        print(f"error: config not found: {exc}", file=sys.stderr)
        return 1
    except cfgmod.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workers is not None:
        cfg.workers = args.workers
    try:
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
