"""Discounting, defaultable bonds and CDS par spreads, with the inverse map
from quoted spread to log-leverage used by the filter.

Spreads are decimals per annum internally.
"""
from __future__ import annotations

import datetime as _dt
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .firstpassage import FftGrid, SurvivalEngine, choose_grid
from .timechange import TcbmParams, TimeChangeSpec

DEFAULT_TENORS = (1.0, 2.0, 3.0, 4.0, 5.0, 7.0, 10.0)
DEFAULT_PREMIUM_DT = 0.25
MAX_MATURITY = 30.0


class SpreadRangeError(ValueError):
    """Quoted spread outside the range the model can produce on the lattice."""

    def __init__(self, y, low, high):
        self.y, self.low, self.high = y, low, high
        super().__init__(f"spread {y:.6g} outside attainable range [{low:.6g}, {high:.6g}]")


@dataclass(frozen=True)
class ZeroCurve:
    """Continuously compounded zero yields, linearly interpolated in maturity."""

    maturities: tuple
    yields: tuple
    asof: _dt.date | None = None

    def __post_init__(self):
        m = np.asarray(self.maturities, dtype=float)
        z = np.asarray(self.yields, dtype=float)
        if m.ndim != 1 or m.shape != z.shape or m.size == 0:
            raise ValueError("maturities and yields must be equal-length 1-d sequences")
        if np.any(np.diff(m) <= 0):
            raise ValueError("maturities must be strictly increasing")
        if m[0] <= 0:
            raise ValueError("maturities must be positive")
        object.__setattr__(self, "maturities", tuple(m.tolist()))
        object.__setattr__(self, "yields", tuple(z.tolist()))

    @classmethod
    def flat(cls, rate: float, asof=None) -> "ZeroCurve":
        return cls((1.0 / 12.0, 30.0), (rate, rate), asof)

    def zero_rate(self, t):
        return np.interp(t, self.maturities, self.yields)


def discount(curve: ZeroCurve, t):
    """``B(t) = exp(-z(t) t)``; flat yield extrapolation beyond the pillars."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > MAX_MATURITY):
        raise ValueError(f"t outside [0, {MAX_MATURITY}]")
    out = np.exp(-curve.zero_rate(t) * t)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class CdsContractSpec:
    tenor: float
    premium_dt: float = DEFAULT_PREMIUM_DT
    recovery: float = 0.4

    def __post_init__(self):
        n = self.tenor / self.premium_dt
        if self.tenor <= 0 or abs(n - round(n)) > 1e-9 or round(n) < 1:
            raise ValueError(f"tenor {self.tenor} is not a positive multiple of {self.premium_dt}")
        if not 0.0 <= self.recovery < 1.0:
            raise ValueError("recovery must lie in [0, 1)")

    @property
    def n_premiums(self) -> int:
        return int(round(self.tenor / self.premium_dt))


def defaultable_bond(spec: TimeChangeSpec, params_q: TcbmParams, curve: ZeroCurve, recovery: float,
                     maturity: float, grid: FftGrid | None = None) -> float:
    """Zero-coupon bond with recovery of treasury: ``B(T)[P + R(1 - P)]``."""
    if not maturity > 0:
        raise ValueError("maturity must be positive")
    if not 0.0 <= recovery <= 1.0:
        raise ValueError("recovery must lie in [0, 1]")
    if grid is None:
        grid = choose_grid(spec, params_q, maturity, x_max=max(4.0, params_q.x))
    p = float(SurvivalEngine(spec, params_q.sigma, params_q.beta, [maturity], grid).values(params_q.x)[0])
    return discount(curve, maturity) * (p + recovery * (1.0 - p))


class CdsPricer:
    """Par spreads for a tenor set under one risk-neutral model.

    Survival on all premium dates ``k * premium_dt`` is shared by every tenor
    and every discount curve, so a pricer is built once per parameter vector
    and then applied to many dates.
    """

    def __init__(self, spec: TimeChangeSpec, sigma: float, beta_q: float, recovery: float,
                 tenors: Sequence[float] = DEFAULT_TENORS, premium_dt: float = DEFAULT_PREMIUM_DT,
                 grid: FftGrid | None = None, eps: float = 1e-10, x_hi: float = 4.0):
        self.contracts = [CdsContractSpec(T, premium_dt, recovery) for T in tenors]
        self.tenors = tuple(float(T) for T in tenors)
        self.premium_dt = float(premium_dt)
        self.recovery = float(recovery)
        n_k = max(c.n_premiums for c in self.contracts)
        self.times = self.premium_dt * np.arange(1, n_k + 1)
        if grid is None:
            grid = choose_grid(spec, TcbmParams(x_hi, sigma, beta_q), self.times, eps=eps, x_max=x_hi)
        self.grid = grid
        self.engine = SurvivalEngine(spec, sigma, beta_q, self.times, grid)
        # mask[j, k] = premium date k belongs to tenor j; last[j, k] marks its maturity
        idx = np.arange(n_k)
        nprem = np.array([c.n_premiums for c in self.contracts])
        self._mask = (idx[None, :] < nprem[:, None]).astype(float)
        self._last = (idx[None, :] == nprem[:, None] - 1).astype(float)

    def discount_factors(self, curve: ZeroCurve) -> np.ndarray:
        return discount(curve, self.times)

    def _legs(self, disc):
        """Protection and premium weights, shape ``disc.shape[:-1] + (n_tenor, n_k)``.

        Protection leg: ``sum_k w_k (1 - P_k)`` with ``w_k = B_k - B_{k+1}`` before
        maturity and ``w_N = B_N`` at maturity.
        """
        disc = np.asarray(disc, dtype=float)
        nxt = np.concatenate([disc[..., 1:], np.zeros(disc.shape[:-1] + (1,))], axis=-1)
        step = (disc - nxt)[..., None, :]
        d = disc[..., None, :]
        prot = (self._mask - self._last) * step + self._last * d
        prem = self.premium_dt * self._mask * d
        return prot, prem

    def _ratio(self, prot, prem, p, dp=None):
        lgd = 1.0 - self.recovery
        num = lgd * (prot @ (1.0 - p))
        den = prem @ p
        f = num / den
        if dp is None:
            return f, den
        dnum = -lgd * (prot @ dp)
        dden = prem @ dp
        return f, den, (dnum * den - num * dden) / (den * den)

    def spreads(self, x, curve_or_disc) -> np.ndarray:
        """Par spreads of shape ``(n_tenor,) + x.shape``."""
        disc = self._disc(curve_or_disc)
        x = np.asarray(x, dtype=float)
        p = self.engine.values(x.reshape(-1))
        prot, prem = self._legs(disc)
        f, den = self._ratio(prot, prem, p)
        if np.any(den < 1e-12):
            raise ValueError("x too close to default for a quotable spread")
        return f.reshape((len(self.tenors),) + x.shape)

    def slopes(self, x, curve_or_disc) -> np.ndarray:
        """``d spread / dx`` (negative), shape ``(n_tenor,) + x.shape``."""
        disc = self._disc(curve_or_disc)
        x = np.asarray(x, dtype=float)
        xf = x.reshape(-1)
        p, dp = self.engine.values_and_slopes(xf)
        prot, prem = self._legs(disc)
        _, _, df = self._ratio(prot, prem, p, dp)
        return df.reshape((len(self.tenors),) + x.shape)

    def lattice(self, curve_or_disc) -> tuple[np.ndarray, np.ndarray]:
        """Spreads on the positive x-lattice nodes up to ``x_hi``: ``(x, F)``."""
        disc = self._disc(curve_or_disc)
        x, p = self.engine.lattice()
        prot, prem = self._legs(disc)
        f, _ = self._ratio(prot, prem, p[:, 1:])
        return x[1:], f

    def _disc(self, curve_or_disc):
        if isinstance(curve_or_disc, ZeroCurve):
            return self.discount_factors(curve_or_disc)
        return np.asarray(curve_or_disc, dtype=float)

    def invert(self, y, disc, tol: float = 1e-14, max_iter: int = 40):
        """Solve ``F_j(x) = y`` for a panel of quotes.

        Parameters
        ----------
        y : array (n_dates, n_tenor)
            Quoted spreads (decimal); NaN entries are skipped.
        disc : array (n_dates, n_k)
            Discount factors at the premium dates, one row per date.

        Returns
        -------
        x, slope, ok : arrays (n_dates, n_tenor)
            Implied log-leverage, ``dF/dx`` there, and a validity mask
            (False where the quote is outside the attainable range).
        """
        y = np.atleast_2d(np.asarray(y, dtype=float))
        disc = np.atleast_2d(np.asarray(disc, dtype=float))
        n_d, n_j = y.shape
        xl, pl = self.engine.lattice()
        xl, pl = xl[1:], pl[:, 1:]
        prot, prem = self._legs(disc)  # (n_d, n_j, n_k)
        prot = prot.reshape(n_d * n_j, -1)
        prem = prem.reshape(n_d * n_j, -1)
        yf = y.reshape(-1)
        lgd = 1.0 - self.recovery
        with np.errstate(divide="ignore", invalid="ignore"):
            fl = lgd * (prot @ (1.0 - pl)) / (prem @ pl)  # (n_obs, m), decreasing in x
        ok = np.isfinite(yf) & (yf < fl[:, 0]) & (yf > fl[:, -1])
        # bracket index: last node with F >= y
        below = fl >= yf[:, None]
        i = np.clip(below.sum(axis=1) - 1, 0, len(xl) - 2)
        h = xl[1] - xl[0]
        f0 = fl[np.arange(len(yf)), i]
        f1 = fl[np.arange(len(yf)), i + 1]
        lo = xl[i]
        hi = xl[i + 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = np.where(ok, (f0 - yf) / (f0 - f1), 0.5)
        x = lo + np.clip(frac, 0.0, 1.0) * h
        act = ok.copy()
        slope = np.full(yf.shape, np.nan)
        ytol = tol * np.maximum(1.0, np.abs(yf))
        for _ in range(max_iter):
            if not act.any():
                break
            xa = x[act]
            p, dp = self.engine.values_and_slopes(xa, clamp=False)
            pa, pr = prot[act], prem[act]
            num = lgd * np.einsum("ok,ko->o", pa, 1.0 - p)
            den = np.einsum("ok,ko->o", pr, p)
            dnum = -lgd * np.einsum("ok,ko->o", pa, dp)
            dden = np.einsum("ok,ko->o", pr, dp)
            f = num / den
            df = (dnum * den - num * dden) / (den * den)
            r = f - yf[act]
            slope[act] = df
            # F is decreasing: r > 0 means the root lies to the right
            la, ha = lo[act], hi[act]
            la = np.where(r > 0, xa, la)
            ha = np.where(r <= 0, xa, ha)
            xn = xa - r / df
            outside = ~(xn > la) | ~(xn < ha)
            xn = np.where(outside, 0.5 * (la + ha), xn)
            lo[act], hi[act] = la, ha
            done = np.abs(r) <= ytol[act]
            # a converged point keeps x where the residual was measured
            x[act] = np.where(done, xa, xn)
            done |= np.abs(xn - xa) <= 1e-14 * np.maximum(1.0, np.abs(xa))
            idx = np.flatnonzero(act)
            act[idx[done]] = False
        x = np.where(ok, x, np.nan)
        return x.reshape(n_d, n_j), slope.reshape(n_d, n_j), ok.reshape(n_d, n_j)

    def attainable(self, disc) -> tuple[np.ndarray, np.ndarray]:
        """Lowest and highest quotable spread per tenor on this lattice."""
        _, f = self.lattice(disc)
        return f[..., -1], f[..., 0]


def _single(spec, params_q, contract, grid, x_hi=4.0):
    return CdsPricer(spec, params_q.sigma, params_q.beta, contract.recovery, [contract.tenor],
                     contract.premium_dt, grid=grid, x_hi=max(x_hi, params_q.x))


def cds_spread(spec: TimeChangeSpec, params_q: TcbmParams, curve: ZeroCurve, contract: CdsContractSpec,
               x: float | None = None, grid: FftGrid | None = None) -> float:
    """Fair CDS spread (decimal per annum) for a firm at log-leverage ``x``."""
    x = params_q.x if x is None else x
    if not np.all(np.asarray(x) > 0):
        raise ValueError("x must be positive")
    pr = _single(spec, params_q, contract, grid, x_hi=max(4.0, float(np.max(x))))
    out = pr.spreads(x, curve)[0]
    return float(out) if np.ndim(out) == 0 else out


def cds_curve_on_lattice(spec: TimeChangeSpec, params_q: TcbmParams, curve: ZeroCurve,
                         contract: CdsContractSpec, grid: FftGrid | None = None):
    """``(x, spread)`` on every positive lattice node up to ``grid.x_hi``."""
    pr = _single(spec, params_q, contract, grid)
    x, f = pr.lattice(curve)
    return x, f[0]


def invert_cds(spec: TimeChangeSpec, params_q: TcbmParams, curve: ZeroCurve, contract: CdsContractSpec,
               y: float, grid: FftGrid | None = None) -> float:
    """Log-leverage at which the model spread equals ``y``."""
    pr = _single(spec, params_q, contract, grid)
    disc = pr.discount_factors(curve)
    x, _, ok = pr.invert([[y]], disc[None, :])
    if not ok[0, 0]:
        low, high = pr.attainable(disc)
        raise SpreadRangeError(y, float(low[0]), float(high[0]))
    return float(x[0, 0])


def cds_slope(spec: TimeChangeSpec, params_q: TcbmParams, curve: ZeroCurve, contract: CdsContractSpec,
              x: float, grid: FftGrid | None = None) -> float:
    """``d spread / dx`` at ``x``; negative, since spreads fall as leverage falls."""
    pr = _single(spec, params_q, contract, grid, x_hi=max(4.0, x + 1.0))
    g = pr.grid
    if not g.eta_star <= x <= g.x_hi - g.eta_star:
        raise ValueError("x at or beyond the lattice edge")
    return float(pr.slopes(x, curve)[0])
