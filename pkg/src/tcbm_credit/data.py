"""CDS panels, treasury curves and their CSV formats.

External units are basis points for spreads and percent for yields; the
library works in decimals.
"""
from __future__ import annotations

import csv
import datetime as dt
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pricing import ZeroCurve

log = logging.getLogger(__name__)

BP = 1e-4
MAX_YIELD_PCT = 50.0
# 1m 3m 6m 1y 2y 3y 5y 7y 10y 20y 30y
STANDARD_PILLARS = frozenset([1 / 12, 0.25, 0.5, 1.0, 2.0, 3.0, 5.0, 7.0, 10.0, 20.0, 30.0])


class DataError(ValueError):
    pass


@dataclass
class CdsPanel:
    """Weekly quotes, one row per date and one column per tenor, in basis points.

    Missing quotes are NaN.
    """

    dates: list
    tenors: tuple
    bid: np.ndarray
    mid: np.ndarray
    ask: np.ndarray
    no_default: np.ndarray = None

    def __post_init__(self):
        self.tenors = tuple(float(t) for t in self.tenors)
        self.bid = np.asarray(self.bid, dtype=float)
        self.mid = np.asarray(self.mid, dtype=float)
        self.ask = np.asarray(self.ask, dtype=float)
        shape = (len(self.dates), len(self.tenors))
        for a in (self.bid, self.mid, self.ask):
            if a.shape != shape:
                raise DataError(f"quote array shape {a.shape} != {shape}")
        if self.no_default is None:
            self.no_default = np.ones(len(self.dates), dtype=bool)
        ok = np.isfinite(self.mid)
        if np.any(self.bid[ok] > self.mid[ok]) or np.any(self.mid[ok] > self.ask[ok]):
            raise DataError("bid <= mid <= ask violated")
        if np.any(self.ask[ok] - self.bid[ok] <= 0):
            raise DataError("bid/ask width must be positive")

    @property
    def n_dates(self) -> int:
        return len(self.dates)

    @property
    def n_tenors(self) -> int:
        return len(self.tenors)

    @property
    def spreads(self) -> np.ndarray:
        """Mid quotes as decimals."""
        return self.mid * BP

    @property
    def widths(self) -> np.ndarray:
        """Bid/ask widths as decimals."""
        return (self.ask - self.bid) * BP

    def year_fractions(self) -> np.ndarray:
        """Gaps between consecutive dates in years (7 days = 1/52)."""
        if isinstance(self.dates[0], dt.date):
            days = np.array([(b - a).days for a, b in zip(self.dates[:-1], self.dates[1:])], dtype=float)
        else:
            days = 7.0 * np.diff(np.asarray(self.dates, dtype=float))
        return days / 364.0

    def head(self, m: int) -> "CdsPanel":
        return CdsPanel(self.dates[:m], self.tenors, self.bid[:m], self.mid[:m], self.ask[:m],
                        self.no_default[:m])

    def scaled(self, factor: float) -> "CdsPanel":
        return CdsPanel(self.dates, self.tenors, self.bid * factor, self.mid * factor,
                        self.ask * factor, self.no_default)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["date", "tenor_years", "bid_bp", "mid_bp", "ask_bp"])
            for i, d in enumerate(self.dates):
                for j, t in enumerate(self.tenors):
                    if np.isfinite(self.mid[i, j]):
                        w.writerow([_fmt_date(d), fmt(t), fmt(self.bid[i, j]), fmt(self.mid[i, j]),
                                    fmt(self.ask[i, j])])


def fmt(v) -> str:
    """Fixed 12-significant-digit formatting used by every output file."""
    return f"{float(v):.12g}"


def _fmt_date(d):
    return d.isoformat() if isinstance(d, dt.date) else str(d)


def ingest_cds(path, tenors=None) -> CdsPanel:
    """Read ``date,tenor_years,bid_bp,mid_bp,ask_bp`` rows into a panel.

    Rows with bid > mid or mid > ask are dropped with a warning naming the
    line.  Tenors outside ``tenors`` (when given) are ignored with a warning.
    """
    path = Path(path)
    rows = {}
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            need = {"date", "tenor_years", "bid_bp", "mid_bp", "ask_bp"}
            if reader.fieldnames is None or not need <= set(reader.fieldnames):
                raise DataError(f"{path}: header must contain {sorted(need)}")
            skipped = set()
            for line, row in enumerate(reader, start=2):
                try:
                    d = dt.date.fromisoformat(row["date"].strip())
                    t = float(row["tenor_years"])
                    bid, mid, ask = (float(row[k]) for k in ("bid_bp", "mid_bp", "ask_bp"))
                except (ValueError, AttributeError) as e:
                    raise DataError(f"{path}:{line}: unparseable row ({e})") from None
                if tenors is not None and not any(abs(t - s) < 1e-9 for s in tenors):
                    skipped.add(t)
                    continue
                if not (bid <= mid <= ask) or ask - bid <= 0:
                    log.warning("%s:%d: rejected row, bid/mid/ask out of order", path, line)
                    continue
                key = (d, t)
                if key in rows:
                    raise DataError(f"{path}:{line}: duplicate quote for {d} tenor {t}")
                rows[key] = (bid, mid, ask)
            for t in sorted(skipped):
                log.warning("%s: tenor %g not in the configured set, ignored", path, t)
    except (OSError, UnicodeDecodeError) as e:
        raise DataError(f"{path}: {e}") from None
    if not rows:
        raise DataError(f"{path}: empty panel")
    dates = sorted({d for d, _ in rows})
    ten = sorted({t for _, t in rows})
    q = np.full((3, len(dates), len(ten)), np.nan)
    di = {d: i for i, d in enumerate(dates)}
    ti = {t: j for j, t in enumerate(ten)}
    for (d, t), v in rows.items():
        q[:, di[d], ti[t]] = v
    return CdsPanel(dates, ten, q[0], q[1], q[2])


_TENOR = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([mMyY])\s*$")


def parse_tenor(tok: str) -> float:
    m = _TENOR.match(tok)
    if not m:
        raise DataError(f"bad tenor token {tok!r}")
    v = float(m.group(1))
    return v / 12.0 if m.group(2).lower() == "m" else v


def ingest_treasury(path) -> dict:
    """Read ``date,tenor,zero_yield_pct`` rows into ``{date: ZeroCurve}``."""
    path = Path(path)
    by_date: dict = {}
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            need = {"date", "tenor", "zero_yield_pct"}
            if reader.fieldnames is None or not need <= set(reader.fieldnames):
                raise DataError(f"{path}: header must contain {sorted(need)}")
            for line, row in enumerate(reader, start=2):
                try:
                    d = dt.date.fromisoformat(row["date"].strip())
                    t = parse_tenor(row["tenor"])
                    y = float(row["zero_yield_pct"])
                except ValueError as e:
                    raise DataError(f"{path}:{line}: unparseable row ({e})") from None
                if abs(y) > MAX_YIELD_PCT:
                    raise DataError(f"{path}:{line}: yield {y} exceeds {MAX_YIELD_PCT}%; "
                                    "yields are in percent, not basis points")
                by_date.setdefault(d, {})[t] = y / 100.0
    except OSError as e:
        raise DataError(f"{path}: {e}") from None
    if not by_date:
        raise DataError(f"{path}: no curves")
    out = {}
    for d in sorted(by_date):
        pillars = by_date[d]
        missing = STANDARD_PILLARS - set(pillars)
        if missing:
            log.warning("%s: %s missing pillars %s; built from the rest", path, d,
                        ", ".join(f"{m:g}y" for m in sorted(missing)))
        mats = sorted(pillars)
        out[d] = ZeroCurve(tuple(mats), tuple(pillars[m] for m in mats), d)
    return out


def align_curves(curves: dict, dates) -> list:
    """One curve per panel date; the nearest earlier curve fills gaps."""
    keys = sorted(curves)
    out = []
    for d in dates:
        prior = [k for k in keys if k <= d]
        if not prior:
            raise DataError(f"no treasury curve on or before {d}")
        if prior[-1] != d:
            log.warning("no treasury curve on %s; using %s", d, prior[-1])
        out.append(curves[prior[-1]])
    return out
