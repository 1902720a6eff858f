"""Command-line entry point: ``tcbm-credit price|calibrate|filter|simulate|vuong``.

Spreads in files are basis points; yields are percent.  Exit status is 0 on
success, 2 on bad input data or configuration, 3 on numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .data import BP, DataError, align_curves, fmt, ingest_cds, ingest_treasury
from .estimation import maximize_likelihood, simulate_panel, vuong_test, weekly_loglik_kalman
from .filtering import run_filter
from .firstpassage import NumericalError
from .model import ModelKind, ModelParams
from .pricing import CdsPricer, SpreadRangeError, ZeroCurve

log = logging.getLogger("tcbm_credit")

EXIT_OK, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3
DEFAULT_FLAT_RATE = 0.03


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--model", choices=[k.value for k in ModelKind])
    p.add_argument("--sigma", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--b", type=float)
    p.add_argument("--c", dest="c0", type=float)
    p.add_argument("--beta-q", dest="betaQ0", type=float)
    p.add_argument("--recovery", dest="R0", type=float)
    p.add_argument("--eta", dest="eta0", type=float)
    p.add_argument("--premium-dt", dest="premium_dt", type=float)
    p.add_argument("--tenors", type=lambda s: tuple(float(t) for t in s.split(",")))
    p.add_argument("--threads", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--rate", type=float, default=DEFAULT_FLAT_RATE,
                   help="flat continuously compounded rate when no treasury file is given")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tcbm-credit", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("price", help="CDS term structure at a given log-leverage")
    _common(p)
    p.add_argument("--x", type=float, required=True)
    p.add_argument("--treasury")
    p.add_argument("--date", help="curve date (ISO) when --treasury holds several")
    p.add_argument("--output", help="CSV path (default stdout)")

    p = sub.add_parser("calibrate", help="maximum likelihood fit to a CDS panel")
    _common(p)
    p.add_argument("--cds")
    p.add_argument("--treasury")
    p.add_argument("--filter-mode", dest="filter_mode", choices=["TRUNCATED", "KALMAN"])
    p.add_argument("--starts", type=int, default=3, help="number of optimizer starting points")

    p = sub.add_parser("filter", help="filtered log-leverage path and weekly log-likelihoods")
    _common(p)
    p.add_argument("--cds")
    p.add_argument("--treasury")
    p.add_argument("--filter-mode", dest="filter_mode", choices=["TRUNCATED", "KALMAN"])
    p.add_argument("--params", help="JSON from calibrate; its estimates override the initial values")

    p = sub.add_parser("simulate", help="synthetic weekly panel with its true state path")
    _common(p)
    p.add_argument("--weeks", type=int, default=78)
    p.add_argument("--seed", type=int)
    p.add_argument("--x0", type=float, default=0.7)

    p = sub.add_parser("vuong", help="compare two weekly log-likelihood series")
    p.add_argument("series_i")
    p.add_argument("series_j")
    p.add_argument("--lags", type=int)
    p.add_argument("--output")
    return ap


def _config(args) -> RunConfig:
    keys = ("model", "sigma", "beta", "b", "c0", "betaQ0", "R0", "eta0", "premium_dt", "tenors", "threads",
            "out_dir", "cds", "treasury", "filter_mode", "seed")
    over = {k: getattr(args, k, None) for k in keys}
    return load_config(args.config, **over)


def _curves(cfg: RunConfig, dates, rate):
    if cfg.treasury is None:
        return ZeroCurve.flat(rate)
    return align_curves(ingest_treasury(cfg.treasury), dates)


def _panel(cfg: RunConfig):
    if cfg.cds is None:
        raise DataError("--cds (or 'cds' in the config) is required")
    return ingest_cds(cfg.cds, cfg.tenors)


def _write_csv(path, header, rows, units=None):
    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        if units:
            fh.write(f"# {units}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    finally:
        if path:
            fh.close()


def _out(cfg: RunConfig, name: str) -> Path:
    d = Path(cfg.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d / name


def cmd_price(args) -> int:
    cfg = _config(args)
    theta = cfg.initial_params()
    if args.treasury:
        curves = ingest_treasury(args.treasury)
        if args.date:
            import datetime as dt

            curve = align_curves(curves, [dt.date.fromisoformat(args.date)])[0]
        else:
            curve = curves[max(curves)]
    else:
        curve = ZeroCurve.flat(args.rate)
    spec = theta.time_change(cfg.model)
    pricer = CdsPricer(spec, theta.sigma, theta.beta_q, theta.recovery, cfg.tenors, cfg.premium_dt,
                       eps=cfg.eps_fft, x_hi=max(4.0, args.x))
    f = pricer.spreads(args.x, curve)
    rows = [[fmt(t), fmt(s / BP)] for t, s in zip(cfg.tenors, f)]
    _write_csv(args.output, ["tenor_years", "spread_bp"], rows)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    panel = _panel(cfg)
    curves = _curves(cfg, panel.dates, args.rate)
    res = maximize_likelihood(panel, cfg.model, cfg.initial_params(), curves, cfg.bounds, cfg.filter_mode,
                              cfg.premium_dt, n_starts=args.starts)
    out = res.as_dict()
    out["config"] = cfg.as_dict()
    with open(_out(cfg, "calibration.json"), "w") as fh:
        json.dump(out, fh, indent=2, default=float)
        fh.write("\n")
    names = res.names
    rows = [[str(i)] + [fmt(v) for v in th] + [fmt(ll), fmt(g)] for i, (th, ll, g) in enumerate(res.trace)]
    _write_csv(_out(cfg, "calibration_trace.csv"), ["iteration", *names, "loglik", "grad_inf_norm"], rows)
    print(json.dumps({k: out[k] for k in ("model", "theta", "stderr", "loglik", "rmse")}, default=float))
    return EXIT_OK


def _params_from(cfg: RunConfig, path) -> ModelParams:
    theta = cfg.initial_params()
    if path:
        try:
            with open(path) as fh:
                est = json.load(fh)["theta"]
        except (OSError, KeyError, json.JSONDecodeError) as e:
            raise DataError(f"{path}: {e}") from None
        theta = theta.with_free(cfg.model, [est[k] for k in theta.free_names(cfg.model)])
    return theta


def cmd_filter(args) -> int:
    cfg = _config(args)
    panel = _panel(cfg)
    curves = _curves(cfg, panel.dates, args.rate)
    theta = _params_from(cfg, args.params)
    res = run_filter(panel, theta, cfg.model, curves, cfg.filter_mode, cfg.premium_dt)
    weekly = weekly_loglik_kalman(panel, theta, cfg.model, curves, cfg.premium_dt)
    rows = []
    for i, d in enumerate(panel.dates):
        m, s = res.x_mean[i], res.x_sd[i]
        rows.append([d.isoformat(), fmt(res.x_hat[i]), fmt(m), fmt(s), fmt(max(m - 2 * s, 0.0)), fmt(m + 2 * s),
                     fmt(res.increments[i]), fmt(weekly[i])])
    _write_csv(_out(cfg, "filter.csv"),
               ["date", "x_hat", "x_mean", "x_sd", "band_lo", "band_hi", "loglik_increment", "l_t"], rows,
               units="x is log-leverage; bands are mean +/- 2 sd; l_t from the Kalman form")
    print(json.dumps({"loglik": res.loglik, "kalman_sum": float(weekly.sum()), "dates": panel.n_dates}))
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args)
    theta = cfg.initial_params()
    curve = ZeroCurve.flat(args.rate)
    sim = simulate_panel(cfg.model, theta, curve, args.weeks, cfg.tenors, cfg.seed, args.x0, cfg.premium_dt)
    sim.panel.to_csv(_out(cfg, "panel.csv"))
    _write_csv(_out(cfg, "truth.csv"), ["date", "x"],
               [[d.isoformat(), fmt(x)] for d, x in zip(sim.panel.dates, sim.x_true)])
    tokens = ["1m", "3m", "6m", "1y", "2y", "3y", "5y", "7y", "10y", "20y", "30y"]
    _write_csv(_out(cfg, "treasury.csv"), ["date", "tenor", "zero_yield_pct"],
               [[d.isoformat(), tok, fmt(100.0 * args.rate)] for d in sim.panel.dates for tok in tokens])
    print(json.dumps({"weeks": sim.panel.n_dates, "defaulted": sim.defaulted, "seed": cfg.seed}))
    return EXIT_OK


def _read_series(path) -> np.ndarray:
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    except OSError as e:
        raise DataError(f"{path}: {e}") from None
    header, body = rows[0], rows[1:]
    col = header.index("l_t") if "l_t" in header else len(header) - 1
    try:
        return np.array([float(r[col]) for r in body])
    except (ValueError, IndexError) as e:
        raise DataError(f"{path}: {e}") from None


def cmd_vuong(args) -> int:
    rep = vuong_test(_read_series(args.series_i), _read_series(args.series_j), args.lags)
    text = json.dumps(rep.as_dict(), indent=2)
    if args.output:
        Path(args.output).write_text(text + "\n")
    print(text)
    return EXIT_OK


COMMANDS = {"price": cmd_price, "calibrate": cmd_calibrate, "filter": cmd_filter, "simulate": cmd_simulate,
            "vuong": cmd_vuong}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=getattr(args, "threads", None) or 1):
            return COMMANDS[args.command](args)
    except (DataError, SpreadRangeError) as e:
        log.error("%s", e)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as e:
        log.error("numerical failure: %s", e)
        return EXIT_NUMERIC
    except ValueError as e:
        log.error("%s", e)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
