"""Maximum likelihood, Fisher standard errors, Vuong comparison, synthetic panels."""
from __future__ import annotations

import datetime as dt
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .data import BP, CdsPanel
from .firstpassage import NumericalError, conditional_density, survival_at
from .filtering import (FilterMode, LOG_2PI, QuoteTransform, as_curve_list, model_spreads, predict_step,
                        predictor_for, rmse, run_filter, FilterState)
from .model import DEFAULT_BOUNDS, ModelKind, ModelParams
from .pricing import DEFAULT_TENORS, CdsPricer, ZeroCurve

log = logging.getLogger(__name__)

WEEK = 1.0 / 52.0
GRAD_STEP = 1e-5
HESS_STEP = 1e-4
PENALTY = -1e12
STEP_FRACTION = 0.02


# ----------------------------------------------------------------------------
# likelihood


def loglik(panel: CdsPanel, theta: ModelParams, kind, curves, mode=FilterMode.TRUNCATED,
           premium_dt: float = 0.25) -> float:
    return run_filter(panel, theta, kind, curves, mode, premium_dt).loglik


def weekly_loglik_kalman(panel: CdsPanel, theta: ModelParams, kind, curves,
                         premium_dt: float = 0.25) -> np.ndarray:
    """Per-date log-likelihood contributions from the Kalman recursion.

    For each date the quotes form a K-vector observation of the scalar state
    with innovation covariance ``S = Pbar 1 1' + diag(eta^2 w~^2)``; the
    contribution is the gaussian log-density of the innovations, minus
    ``sum log |dF/dx|``, plus the log no-default factor of the preceding step.
    """
    kind = ModelKind.parse(kind)
    tr = QuoteTransform(panel, theta, kind, curves, premium_dt)
    spec = theta.time_change(kind)
    gaps = panel.year_fractions()
    out = np.zeros(panel.n_dates)
    mean = var = None
    for i in range(panel.n_dates):
        log_surv = 0.0
        if mean is not None and i > 0:
            prior = FilterState(mean, var, 0.0, FilterMode.KALMAN)
            nxt, info = predict_step(prior, predictor_for(spec, theta.sigma, theta.beta, gaps[i - 1]))
            mean, var, log_surv = nxt.mean, nxt.var, info["log_m0"]
        meas = tr.measurement(i)
        if meas is None:
            out[i] = log_surv
            continue
        v = meas.valid
        y = meas.x_tilde[v]
        r = (theta.eta * meas.w_tilde[v]) ** 2
        jac = float(np.log(np.abs(meas.slope[v])).sum())
        k = len(y)
        if mean is None:
            # diffuse prior: profile out the state
            prec = 1.0 / r
            a = float(prec @ y) / prec.sum()
            out[i] = (-0.5 * float(prec @ (y - a) ** 2) - 0.5 * (k - 1) * LOG_2PI
                      - 0.5 * float(np.log(r).sum()) - 0.5 * math.log(prec.sum()) - jac)
            mean, var = a, 1.0 / prec.sum()
            continue
        s = var * np.ones((k, k)) + np.diag(r)
        nu = y - mean
        sign, logdet = np.linalg.slogdet(s)
        if sign <= 0:
            raise NumericalError("innovation covariance is singular")
        sol = np.linalg.solve(s, nu)
        out[i] = log_surv - 0.5 * logdet - 0.5 * float(nu @ sol) - 0.5 * k * LOG_2PI - jac
        gain = var * np.linalg.solve(s, np.ones(k))
        mean = mean + float(gain @ nu)
        var = var * (1.0 - float(gain.sum()))
    return out


# ----------------------------------------------------------------------------
# Vuong


@dataclass(frozen=True)
class VuongReport:
    lam: float
    s_hat: float
    statistic: float
    lags: int
    series_i: np.ndarray = field(repr=False)
    series_j: np.ndarray = field(repr=False)

    def as_dict(self) -> dict:
        return {"lambda": self.lam, "s_hat": self.s_hat, "T": self.statistic, "lags": self.lags,
                "M": len(self.series_i)}


def newey_west_lag(m: int) -> int:
    return int(math.floor(4.0 * (m / 100.0) ** (2.0 / 9.0)))


def newey_west_variance(d, lags: int) -> float:
    """Bartlett-weighted long-run variance of a demeaned series."""
    d = np.asarray(d, dtype=float)
    e = d - d.mean()
    m = len(e)
    s2 = float(e @ e) / m
    for l in range(1, lags + 1):
        s2 += 2.0 * (1.0 - l / (lags + 1.0)) * float(e[l:] @ e[:-l]) / m
    return s2


def vuong_test(l_i, l_j, lags: int | None = None) -> VuongReport:
    """``T = sum(l_i - l_j) / (s_hat sqrt(M))`` with a Newey-West ``s_hat``."""
    l_i = np.asarray(l_i, dtype=float)
    l_j = np.asarray(l_j, dtype=float)
    if l_i.shape != l_j.shape or l_i.ndim != 1:
        raise ValueError("series must be 1-d and of equal length")
    m = len(l_i)
    if m < 20:
        raise ValueError("at least 20 observations are required")
    if lags is None:
        lags = newey_west_lag(m)
    d = l_i - l_j
    lam = float(d.sum())
    if np.all(d == 0):
        return VuongReport(0.0, 0.0, 0.0, lags, l_i, l_j)
    s2 = newey_west_variance(d, lags)
    if not s2 > 0:
        raise ValueError("degenerate difference series: zero long-run variance")
    s = math.sqrt(s2)
    return VuongReport(lam, s, lam / (s * math.sqrt(m)), lags, l_i, l_j)


# ----------------------------------------------------------------------------
# estimation


@dataclass
class EstimationResult:
    kind: ModelKind
    theta: ModelParams
    names: tuple
    stderr: np.ndarray
    loglik: float
    fisher: np.ndarray
    rmse: float
    x_path: np.ndarray
    x_av: float
    x_std: float
    n_iter: int
    n_eval: int
    converged: bool
    message: str
    hessian_ok: bool = True
    stderr_half_step: np.ndarray | None = None
    trace: list = field(default_factory=list, repr=False)
    starts: list = field(default_factory=list, repr=False)
    seconds: float = 0.0

    @property
    def theta_vector(self) -> np.ndarray:
        return np.array(self.theta.free_vector(self.kind))

    def as_dict(self) -> dict:
        return {
            "model": self.kind.value,
            "theta": dict(zip(self.names, self.theta_vector.tolist())),
            "stderr": dict(zip(self.names, self.stderr.tolist())),
            "frozen": {k: getattr(self.theta, k) for k in ("sigma", "beta", "b")},
            "loglik": self.loglik,
            "fisher": self.fisher.tolist(),
            "rmse": self.rmse,
            "x_av": self.x_av,
            "x_std": self.x_std,
            "iterations": self.n_iter,
            "evaluations": self.n_eval,
            "converged": self.converged,
            "message": self.message,
            "hessian_ok": self.hessian_ok,
            "starts": self.starts,
            "seconds": self.seconds,
        }


def path_summary(x_hat) -> tuple[float, float]:
    """Mean, and square root of the annualized quadratic variation, of a weekly path."""
    x = np.asarray(x_hat, dtype=float)
    x = x[np.isfinite(x)]
    if len(x) < 2:
        return float(x.mean()) if len(x) else math.nan, math.nan
    dx = np.diff(x)
    return float(x.mean()), float(math.sqrt(52.0 * np.mean(dx * dx)))


class Objective:
    """``theta -> loglik`` on the free coordinates, with evaluation bookkeeping."""

    def __init__(self, panel, kind, base: ModelParams, curves, mode, premium_dt):
        self.panel, self.kind, self.base = panel, ModelKind.parse(kind), base
        self.curves = as_curve_list(curves, panel.n_dates)
        self.mode, self.premium_dt = FilterMode(mode), premium_dt
        self.n_eval = 0
        self.cache: dict = {}

    def __call__(self, v) -> float:
        key = tuple(float(a) for a in v)
        if key in self.cache:
            return self.cache[key]
        self.n_eval += 1
        try:
            val = run_filter(self.panel, self.base.with_free(self.kind, v), self.kind, self.curves,
                             self.mode, self.premium_dt).loglik
            if not math.isfinite(val):
                val = PENALTY
        except (NumericalError, ValueError, FloatingPointError) as e:
            log.debug("objective failed at %s: %s", key, e)
            val = PENALTY
        if len(self.cache) > 4096:
            self.cache.clear()
        self.cache[key] = val
        return val


def _steps(v, rel, lo, hi):
    h = rel * np.maximum(np.abs(v), 0.1)
    return np.minimum(h, 0.5 * (hi - lo))


def _gradient(f, v, lo, hi, rel=GRAD_STEP):
    g = np.zeros(len(v))
    h = _steps(v, rel, lo, hi)
    for i in range(len(v)):
        a, b = v.copy(), v.copy()
        a[i] = min(v[i] + h[i], hi[i])
        b[i] = max(v[i] - h[i], lo[i])
        g[i] = (f(a) - f(b)) / (a[i] - b[i])
    return g


def hessian(f, v, lo, hi, rel=HESS_STEP) -> np.ndarray:
    """Central-difference Hessian; stencils touching the box are shifted inside."""
    v = np.asarray(v, dtype=float)
    n = len(v)
    h = _steps(v, rel, lo, hi)
    c = np.clip(v, lo + h, hi - h)
    f0 = f(c)
    out = np.zeros((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h[i]
        out[i, i] = (f(c + e) - 2.0 * f0 + f(c - e)) / h[i] ** 2
        for j in range(i):
            d = np.zeros(n)
            d[j] = h[j]
            val = (f(c + e + d) - f(c + e - d) - f(c - e + d) + f(c - e - d)) / (4.0 * h[i] * h[j])
            out[i, j] = out[j, i] = val
    return out


def _stderr_from(hess):
    fisher = -0.5 * (hess + hess.T)
    try:
        np.linalg.cholesky(fisher)
        cov = np.linalg.inv(fisher)
        return fisher, np.sqrt(np.diag(cov)), True
    except np.linalg.LinAlgError:
        return fisher, np.full(len(hess), np.nan), False


def default_starts(kind, bounds, init: ModelParams, n: int) -> list:
    """``init`` plus ``n - 1`` points spread over the interior of the box."""
    names = init.free_names(kind)
    starts = [np.array(init.free_vector(kind))]
    for k in range(1, n):
        frac = k / n
        starts.append(np.array([bounds[nm][0] + (0.15 + 0.7 * ((frac + 0.37 * j) % 1.0))
                                * (bounds[nm][1] - bounds[nm][0]) for j, nm in enumerate(names)]))
    return starts


def maximize_likelihood(panel: CdsPanel, kind, init: ModelParams, curves, bounds: dict | None = None,
                        mode=FilterMode.TRUNCATED, premium_dt: float = 0.25, n_starts: int = 1,
                        max_eval: int = 500, hessian_check: bool = True,
                        compute_stderr: bool = True) -> EstimationResult:
    """Box-constrained quasi-Newton ascent of the filter log-likelihood.

    Gradients are central differences (relative step ``1e-5``); the Fisher
    information is minus the central-difference Hessian (relative step
    ``1e-4``) at the optimum.  With ``hessian_check`` the standard errors
    are recomputed at half the step and a warning is logged if any moves
    by more than 5%.
    """
    t0 = time.perf_counter()
    kind = ModelKind.parse(kind)
    bounds = {**DEFAULT_BOUNDS, **(bounds or {})}
    names = init.free_names(kind)
    lo = np.array([bounds[k][0] for k in names], dtype=float)
    hi = np.array([bounds[k][1] for k in names], dtype=float)
    v0 = np.array(init.free_vector(kind), dtype=float)
    if np.any(v0 < lo) or np.any(v0 > hi):
        raise ValueError(f"initial parameters {dict(zip(names, v0))} outside the box")
    obj = Objective(panel, kind, init, curves, mode, premium_dt)
    trace = []

    # optimize in coordinates scaled to a fraction of the box so the first
    # quasi-Newton step stays local
    scale = STEP_FRACTION * (hi - lo)

    def fun(u):
        v = np.clip(v_ref + u * scale, lo, hi)
        val = obj(v)
        g = _gradient(obj, v, lo, hi)
        trace.append((v.tolist(), val, float(np.max(np.abs(g)))))
        return -val, -g * scale

    ends = []
    for start in default_starts(kind, bounds, init, n_starts):
        v_ref = np.clip(start, lo, hi)
        tol = 1e-6 * max(1.0, abs(obj(v_ref)))
        res = optimize.minimize(fun, np.zeros(len(v_ref)), jac=True, method="L-BFGS-B",
                                bounds=list(zip((lo - v_ref) / scale, (hi - v_ref) / scale)),
                                options={"maxfun": max_eval, "maxiter": max_eval,
                                         "gtol": tol * float(np.min(scale)), "ftol": 1e-13})
        res.x = np.clip(v_ref + res.x * scale, lo, hi)
        ends.append(res)
    best = min(ends, key=lambda r: r.fun)
    v_hat = np.clip(best.x, lo, hi)
    theta = init.with_free(kind, v_hat)
    fr = run_filter(panel, theta, kind, curves, mode, premium_dt)
    if obj.n_eval >= max_eval and not best.success:
        raise NumericalError(f"no convergence after {obj.n_eval} evaluations: {best.message}")
    n = len(names)
    fisher, se, ok = np.full((n, n), np.nan), np.full(n, np.nan), False
    se_half = None
    if compute_stderr:
        fisher, se, ok = _stderr_from(hessian(obj, v_hat, lo, hi))
        if not ok:
            log.warning("Hessian is not negative definite at the optimum; standard errors unreliable")
        if hessian_check and ok:
            _, se_half, ok_half = _stderr_from(hessian(obj, v_hat, lo, hi, rel=HESS_STEP / 2))
            if ok_half and np.any(np.abs(se_half / se - 1.0) > 0.05):
                log.warning("standard errors change by more than 5%% when the Hessian step is halved")
    x_av, x_std = path_summary(fr.x_hat)
    fit_rmse = rmse(panel, theta, kind, curves, fr.x_hat, premium_dt)
    return EstimationResult(
        kind, theta, names, se, fr.loglik, fisher, fit_rmse, fr.x_hat, x_av, x_std,
        int(sum(r.nit for r in ends)), obj.n_eval, bool(best.success), str(best.message), ok, se_half,
        trace, [{"x": r.x.tolist(), "loglik": -float(r.fun), "success": bool(r.success)} for r in ends],
        time.perf_counter() - t0)


# ----------------------------------------------------------------------------
# synthetic panels


@dataclass
class SyntheticPanel:
    panel: CdsPanel
    x_true: np.ndarray
    defaulted: bool
    curves: list


def quote_widths(spreads, floor_bp: float = 5.0, frac: float = 0.02):
    """Bid/ask width profile: a floor plus a fraction of the spread (decimals)."""
    return floor_bp * BP + frac * np.asarray(spreads, dtype=float)


def sample_transition(spec, theta: ModelParams, x: float, dt: float, rng: np.random.Generator, size=None):
    """Draw ``X_{t+dt}`` given ``X_t = x`` and no default, by inverse CDF on the density lattice."""
    dens = conditional_density(spec, theta.physical(x), dt, x)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens.values[1:] + dens.values[:-1]) * np.diff(dens.y))])
    cdf /= cdf[-1]
    u = rng.random(size)
    return np.interp(u, cdf, dens.y), dens.survival


def simulate_path(spec, theta: ModelParams, m: int, x0: float, rng: np.random.Generator, dt: float = WEEK):
    """Weekly no-default path of length ``m``; stops early at default."""
    x = np.empty(m)
    x[0] = x0
    for i in range(1, m):
        nxt, surv = sample_transition(spec, theta, x[i - 1], dt, rng)
        if rng.random() >= surv:
            return x[:i], True
        x[i] = nxt
    return x, False


def quotes_for_path(theta: ModelParams, kind, x_path, curves, tenors, rng, premium_dt=0.25,
                    widths=quote_widths):
    """Noisy mid quotes ``F(x_t) + eta * w * z`` and widths, both in decimals."""
    spec = theta.time_change(kind)
    pricer = CdsPricer(spec, theta.sigma, theta.beta_q, theta.recovery, tenors, premium_dt,
                       x_hi=max(4.0, float(np.max(x_path)) + 0.5))
    f = model_spreads(pricer, x_path, curves)
    w = widths(f)
    y = f + theta.eta * w * rng.standard_normal(f.shape)
    return y, w, f


def panel_from_quotes(y, w, start: dt.date = dt.date(2005, 1, 5), tenors=DEFAULT_TENORS) -> CdsPanel:
    m = y.shape[0]
    dates = [start + dt.timedelta(days=7 * i) for i in range(m)]
    mid = y / BP
    half = 0.5 * w / BP
    return CdsPanel(dates, tenors, mid - half, mid, mid + half)


def simulate_panel(kind, theta: ModelParams, curve, m: int = 78, tenors=DEFAULT_TENORS, seed: int = 0,
                   x0: float = 0.7, premium_dt: float = 0.25, widths=quote_widths) -> SyntheticPanel:
    """Synthetic weekly panel: state path under the physical drift ``beta``,
    quotes under ``beta_q`` with gaussian noise scaled by ``eta`` times the width.

    If the firm defaults the panel stops at the last pre-default date.
    """
    kind = ModelKind.parse(kind)
    rng = np.random.default_rng(seed)
    spec = theta.time_change(kind)
    x, defaulted = simulate_path(spec, theta, m, x0, rng)
    curves = as_curve_list(curve, m)[: len(x)]
    y, w, _ = quotes_for_path(theta, kind, x, curves, tenors, rng, premium_dt, widths)
    if np.any(y <= 0):
        raise NumericalError("negative simulated spread; noise too large for the width profile")
    return SyntheticPanel(panel_from_quotes(y, w, tenors=tenors), x, defaulted, curves)
