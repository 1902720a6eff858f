"""Linearized-measurement filter for the hidden log-leverage.

Each quote is inverted through the model spread curve into a direct gaussian
observation of ``x`` with width ``eta * w / |dF/dx|``.  The filtering density
is carried as ``exp(logc) * N(x; mean, var)``, restricted to ``x > 0`` in
TRUNCATED mode and left on the whole line in KALMAN mode.  The transition is
approximated by matching the first two no-default moments.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

from .data import CdsPanel
from .firstpassage import FftGrid, MomentEngine, NumericalError, choose_grid
from .model import ModelKind, ModelParams
from .pricing import CdsPricer, ZeroCurve

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
FIT_HALF_WIDTH = 4.0
MOMENT_X_MAX = 6.0
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class FilterMode(str, enum.Enum):
    TRUNCATED = "TRUNCATED"
    KALMAN = "KALMAN"


# ----------------------------------------------------------------------------
# truncated normal on (0, inf)


def inverse_mills(alpha):
    """``phi(alpha) / (1 - Phi(alpha))``, stable for large ``alpha``."""
    return _SQRT_2_OVER_PI / special.erfcx(np.asarray(alpha, dtype=float) / math.sqrt(2.0))


def truncnorm_moments(mu: float, sigma: float) -> tuple[float, float]:
    """Raw moments ``(E X, E X^2)`` of ``N(mu, sigma^2)`` conditioned on ``X > 0``."""
    alpha = -mu / sigma
    lam = float(inverse_mills(alpha))
    mean = mu + sigma * lam
    var = sigma * sigma * (1.0 + alpha * lam - lam * lam)
    return mean, var + mean * mean


def _ratio_of(theta):
    # mean / sd of the truncated normal with mu / sigma = theta, sigma = 1
    lam = float(inverse_mills(-theta))
    v = 1.0 - theta * lam - lam * lam
    return (theta + lam) / math.sqrt(v), v


def truncnorm_from_moments(m1: float, m2: float, theta_max: float = 40.0) -> tuple[float, float]:
    """Parent ``(mu, sigma)`` of the truncated normal with raw moments ``(m1, m2)``.

    Solves for ``theta = mu / sigma`` from the scale-free ratio ``mean / sd``,
    which increases monotonically from 1 (``theta -> -inf``) to infinity.
    """
    var = m2 - m1 * m1
    if not var > 0 or not m1 > 0:
        raise NumericalError(f"moments ({m1}, {m2}) do not describe a positive density")
    target = m1 / math.sqrt(var)
    if target >= theta_max:
        return m1, math.sqrt(var)
    lo = -10.0
    while _ratio_of(lo)[0] >= target:
        lo *= 2.0
        if lo < -1e4:
            raise NumericalError(f"mean/sd ratio {target} too close to 1")
    try:
        theta = optimize.brentq(lambda th: _ratio_of(th)[0] - target, lo, theta_max, xtol=1e-15, rtol=1e-15)
    except ValueError as e:
        raise NumericalError(f"truncated-normal moment inversion failed: {e}") from None
    sigma = math.sqrt(var / _ratio_of(theta)[1])
    return theta * sigma, sigma


def standardized_moments(alpha: float | None, k_max: int = 4) -> np.ndarray:
    """``E[Z^k | Z > alpha]`` for ``k = 0..k_max``; ``alpha=None`` means no truncation."""
    e = np.empty(max(k_max, 1) + 1)
    e[0] = 1.0
    if alpha is None:
        e[1] = 0.0
        for k in range(2, k_max + 1):
            e[k] = (k - 1) * e[k - 2]
        return e[: k_max + 1]
    lam = float(inverse_mills(alpha))
    e[1] = lam
    for k in range(2, k_max + 1):
        e[k] = alpha ** (k - 1) * lam + (k - 1) * e[k - 2]
    return e[: k_max + 1]


def gaussian_poly_integral(coef, mu: float, sigma: float, truncated: bool) -> tuple[float, float]:
    """``int p(x) N(x; mu, sigma^2) dx`` over ``x > 0`` (or the whole line).

    ``coef`` are power-basis coefficients of ``p`` in ``x``.  Returns
    ``(log_mass, value / mass)`` where ``mass`` is the kernel mass of the
    domain, so the integral is ``exp(log_mass) * value_over_mass``.
    """
    coef = np.asarray(coef, dtype=float)
    zc = _shift(coef, mu, sigma)
    if truncated:
        alpha = -mu / sigma
        e = standardized_moments(alpha, len(zc) - 1)
        log_mass = float(special.log_ndtr(mu / sigma))
    else:
        e = standardized_moments(None, len(zc) - 1)
        log_mass = 0.0
    return log_mass, float(zc @ e)


def _shift(coef, mu, sigma):
    # coefficients of p(mu + sigma z) in powers of z
    p = np.polynomial.Polynomial(coef)
    q = p(np.polynomial.Polynomial([mu, sigma]))
    out = np.zeros(len(coef))
    out[: len(q.coef)] = q.coef
    return out


# ----------------------------------------------------------------------------
# state and measurements


@dataclass(frozen=True)
class FilterState:
    """``exp(logc) * N(x; mean, var)`` on ``x > 0`` (TRUNCATED) or the line (KALMAN).

    ``var = inf`` is the improper flat prior used before the first quote.
    """

    mean: float
    var: float
    logc: float
    mode: FilterMode = FilterMode.TRUNCATED

    @classmethod
    def diffuse(cls, mode=FilterMode.TRUNCATED) -> "FilterState":
        return cls(0.0, math.inf, 0.0, FilterMode(mode))

    @property
    def is_diffuse(self) -> bool:
        return math.isinf(self.var)

    @property
    def truncated(self) -> bool:
        return self.mode is FilterMode.TRUNCATED

    @property
    def sd(self) -> float:
        return math.sqrt(self.var)

    def log_mass(self) -> float:
        """Log of the total mass of the represented density."""
        if self.truncated:
            return self.logc + float(special.log_ndtr(self.mean / self.sd))
        return self.logc

    def moments(self) -> tuple[float, float]:
        """Mean and standard deviation of the represented density."""
        if not self.truncated:
            return self.mean, self.sd
        m1, m2 = truncnorm_moments(self.mean, self.sd)
        return m1, math.sqrt(max(m2 - m1 * m1, 0.0))

    def mode_point(self) -> float:
        return max(self.mean, 0.0) if self.truncated else self.mean


@dataclass(frozen=True)
class MeasurementVector:
    """Transformed quotes for one date.

    ``x_tilde`` are implied log-leverages, ``w_tilde = w / |dF/dx|`` the
    transformed widths, ``slope`` the raw ``dF/dx`` (negative).
    """

    index: int
    x_tilde: np.ndarray
    w_tilde: np.ndarray
    slope: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if not np.any(self.valid):
            raise ValueError(f"date {self.index}: no valid tenor")
        if np.any(~(self.w_tilde[self.valid] > 0)):
            raise ValueError("transformed widths must be positive")

    @property
    def k(self) -> int:
        return int(np.count_nonzero(self.valid))


def fuse(x_tilde, sd) -> tuple[float, float, float]:
    """Product of ``N(x_tilde_k; x, sd_k^2)`` over k as ``C * N(x; mean, var)``.

    Returns ``(mean, var, log C)``.
    """
    x_tilde = np.asarray(x_tilde, dtype=float)
    prec = 1.0 / np.asarray(sd, dtype=float) ** 2
    var = 1.0 / prec.sum()
    mean = var * float(prec @ x_tilde)
    resid = x_tilde - mean
    logc = (-0.5 * float(prec @ (resid * resid)) - 0.5 * len(x_tilde) * LOG_2PI
            + 0.5 * float(np.log(prec).sum()) + 0.5 * (LOG_2PI + math.log(var)))
    return mean, var, logc


def log_normal_pdf(x, mean, var):
    return -0.5 * (LOG_2PI + math.log(var) + (x - mean) ** 2 / var)


def measurement_update(state: FilterState, meas: MeasurementVector, eta: float) -> FilterState:
    """Multiply in the quotes of one date.

    The log-constant gains the gaussian-fusion normalization and the Jacobian
    ``-sum log |dF/dx|`` of the change of variable from spreads to ``x``.
    """
    if not eta > 0:
        raise ValueError("eta must be positive")
    v = meas.valid
    a, s2, logc_meas = fuse(meas.x_tilde[v], eta * meas.w_tilde[v])
    logc = state.logc + logc_meas - float(np.log(np.abs(meas.slope[v])).sum())
    if state.is_diffuse:
        return FilterState(a, s2, logc, state.mode)
    var = 1.0 / (1.0 / state.var + 1.0 / s2)
    mean = var * (state.mean / state.var + a / s2)
    logc += log_normal_pdf(a, state.mean, state.var + s2)
    return FilterState(mean, var, logc, state.mode)


# ----------------------------------------------------------------------------
# prediction


class Predictor:
    """One-step transition for fixed physical dynamics and step ``dt``."""

    def __init__(self, spec, sigma: float, beta: float, dt: float, grid: FftGrid | None = None,
                 x_max: float = MOMENT_X_MAX):
        from .timechange import TcbmParams

        if grid is None:
            grid = choose_grid(spec, TcbmParams(x_max, sigma, beta), dt, x_max=x_max)
        self.engine = MomentEngine(spec, sigma, beta, dt, grid)
        self.x_hi = grid.x_hi
        self.dt = dt
        self.sigma, self.beta = sigma, beta

    def fit_interval(self, state: FilterState) -> tuple[float, float]:
        sd = state.sd
        lo, hi = state.mean - FIT_HALF_WIDTH * sd, state.mean + FIT_HALF_WIDTH * sd
        if state.truncated:
            m, s = state.moments()
            lo = max(lo, 0.0)
            hi = max(hi, m + FIT_HALF_WIDTH * s)
        return lo, hi

    def fit(self, state: FilterState):
        """Quartic interpolants of ``M0, M1, M2`` in ``z = (x - mean) / sd``.

        Returns ``(coef, z_nodes, values)`` with ``coef`` of shape ``(3, 5)``.
        """
        lo, hi = self.fit_interval(state)
        if hi > self.x_hi:
            raise NumericalError(f"state extends to x = {hi:.3g} beyond the moment lattice")
        k = np.arange(5)
        nodes = 0.5 * (lo + hi) + 0.5 * (hi - lo) * np.cos((2 * k + 1) * math.pi / 10.0)
        vals = self.engine.moments(nodes)
        z = (nodes - state.mean) / state.sd
        coef = np.polynomial.polynomial.polyfit(z, vals.T, 4).T
        return coef, z, vals


def predict_step(state: FilterState, predictor: Predictor) -> tuple[FilterState, dict]:
    """Advance one step, conditioning on no default.

    Returns the new state and ``{"log_m0", "m1", "m2"}``; ``log_m0`` is the
    log of the no-default mass factor (the survival probability averaged
    over the current normalized density), which is added to ``logc``.
    """
    if state.is_diffuse:
        raise ValueError("cannot predict from the diffuse prior")
    coef, _, _ = predictor.fit(state)
    if state.truncated:
        alpha = -state.mean / state.sd
        e = standardized_moments(alpha)
        log_dom = float(special.log_ndtr(state.mean / state.sd))
    else:
        e = standardized_moments(None)
        log_dom = 0.0
    ints = coef @ e
    if not ints[0] > 0:
        raise NumericalError("no-default mass is not positive")
    m1 = ints[1] / ints[0]
    m2 = ints[2] / ints[0]
    if not m2 - m1 * m1 > 0:
        raise NumericalError("predictive variance is not positive")
    # survival averaged over the normalized current density
    # the fitted survival can overshoot 1 by roundoff
    log_m0 = min(math.log(ints[0]), 0.0)
    logc = state.logc + log_dom + log_m0
    if state.truncated:
        mu, sig = truncnorm_from_moments(m1, m2)
        logc -= float(special.log_ndtr(mu / sig))
        new = FilterState(mu, sig * sig, logc, state.mode)
    else:
        new = FilterState(m1, m2 - m1 * m1, logc, state.mode)
    return new, {"log_m0": log_m0, "m1": m1, "m2": m2}


# ----------------------------------------------------------------------------
# full recursion


def as_curve_list(curves, m: int) -> list:
    if isinstance(curves, ZeroCurve):
        return [curves] * m
    curves = list(curves)
    if len(curves) != m:
        raise ValueError(f"{len(curves)} curves for {m} dates")
    return curves


class QuoteTransform:
    """Inverts every quote of a panel under one set of risk-neutral parameters."""

    def __init__(self, panel: CdsPanel, theta: ModelParams, kind: ModelKind, curves,
                 premium_dt: float = 0.25, eps: float = 1e-10):
        spec = theta.time_change(kind)
        self.pricer = CdsPricer(spec, theta.sigma, theta.beta_q, theta.recovery, panel.tenors,
                                premium_dt, eps=eps)
        curves = as_curve_list(curves, panel.n_dates)
        self.disc = _discount_rows(self.pricer, curves)
        y = panel.spreads
        x, slope, ok = self.pricer.invert(np.where(np.isfinite(y), y, np.nan), self.disc)
        self.x_tilde = x
        self.slope = slope
        self.valid = ok & np.isfinite(y)
        with np.errstate(invalid="ignore", divide="ignore"):
            self.w_tilde = panel.widths / np.abs(slope)

    def measurement(self, i: int) -> MeasurementVector | None:
        v = self.valid[i]
        if not v.any():
            return None
        return MeasurementVector(i, self.x_tilde[i], self.w_tilde[i], self.slope[i], v)


def _discount_rows(pricer: CdsPricer, curves) -> np.ndarray:
    cache = {}
    rows = []
    for c in curves:
        key = id(c)
        if key not in cache:
            cache[key] = pricer.discount_factors(c)
        rows.append(cache[key])
    return np.vstack(rows)


@dataclass
class FilterResult:
    loglik: float
    states: list            # posterior after each date's quotes
    x_hat: np.ndarray       # posterior mode
    x_mean: np.ndarray
    x_sd: np.ndarray
    increments: np.ndarray  # per-date change in log mass; sums to loglik
    predictive: list = field(default_factory=list)  # state before each date's quotes
    skipped: list = field(default_factory=list)


_PREDICTOR_CACHE: dict = {}


def predictor_for(spec, sigma, beta, dt) -> Predictor:
    key = (spec, float(sigma), float(beta), round(float(dt), 12))
    p = _PREDICTOR_CACHE.get(key)
    if p is None:
        if len(_PREDICTOR_CACHE) > 64:
            _PREDICTOR_CACHE.clear()
        p = _PREDICTOR_CACHE[key] = Predictor(spec, sigma, beta, dt)
    return p


def run_filter(panel: CdsPanel, theta: ModelParams, kind, curves, mode=FilterMode.TRUNCATED,
               premium_dt: float = 0.25, transform: QuoteTransform | None = None) -> FilterResult:
    """Filter the whole panel and return the total log-likelihood and path.

    The first date starts from an improper flat prior on the state.  The
    total is the log mass of the final filtering density.
    """
    kind = ModelKind.parse(kind)
    mode = FilterMode(mode)
    if panel.n_dates == 0:
        raise ValueError("empty panel")
    if transform is None:
        transform = QuoteTransform(panel, theta, kind, curves, premium_dt)
    spec = theta.time_change(kind)
    gaps = panel.year_fractions()
    state = FilterState.diffuse(mode)
    states, predictive, skipped = [], [], []
    x_hat = np.full(panel.n_dates, np.nan)
    x_mean = np.full(panel.n_dates, np.nan)
    x_sd = np.full(panel.n_dates, np.nan)
    incr = np.zeros(panel.n_dates)
    prev_mass = 0.0
    for i in range(panel.n_dates):
        if i > 0 and not state.is_diffuse:
            state, _ = predict_step(state, predictor_for(spec, theta.sigma, theta.beta, gaps[i - 1]))
        predictive.append(state)
        meas = transform.measurement(i)
        if meas is None:
            log.warning("date %s: no quote could be inverted; skipped", panel.dates[i])
            skipped.append(i)
        else:
            state = measurement_update(state, meas, theta.eta)
        states.append(state)
        if not state.is_diffuse:
            mass = state.log_mass()
            incr[i] = mass - prev_mass
            prev_mass = mass
            x_hat[i] = state.mode_point()
            x_mean[i], x_sd[i] = state.moments()
    if state.is_diffuse:
        raise ValueError("no date had an invertible quote")
    return FilterResult(prev_mass, states, x_hat, x_mean, x_sd, incr, predictive, skipped)


def naive_measurement_loglik(panel: CdsPanel, theta: ModelParams, kind, curves, x_path,
                             premium_dt: float = 0.25) -> float:
    """Gaussian spread-space log-density of the quotes given a state path."""
    kind = ModelKind.parse(kind)
    spec = theta.time_change(kind)
    x_path = np.asarray(x_path, dtype=float)
    pricer = CdsPricer(spec, theta.sigma, theta.beta_q, theta.recovery, panel.tenors, premium_dt,
                       x_hi=max(4.0, float(np.nanmax(x_path)) + 0.5))
    fitted = model_spreads(pricer, x_path, as_curve_list(curves, panel.n_dates))
    y, w = panel.spreads, panel.widths
    ok = np.isfinite(y)
    sd = theta.eta * w[ok]
    r = (y[ok] - fitted[ok]) / sd
    return float(-0.5 * (r @ r) - np.log(sd).sum() - 0.5 * ok.sum() * LOG_2PI)


def model_spreads(pricer: CdsPricer, x_path, curves) -> np.ndarray:
    """``F^k(x_t)`` for every date and tenor, shape ``(M, K)``."""
    disc = _discount_rows(pricer, curves)
    x_path = np.asarray(x_path, dtype=float)
    p = pricer.engine.values(x_path)  # (n_k, M)
    prot, prem = pricer._legs(disc)  # (M, K, n_k)
    lgd = 1.0 - pricer.recovery
    num = lgd * np.einsum("mkn,nm->mk", prot, 1.0 - p)
    den = np.einsum("mkn,nm->mk", prem, p)
    return num / den


def rmse(panel: CdsPanel, theta: ModelParams, kind, curves, x_path, premium_dt: float = 0.25) -> float:
    """Root-mean-square model error in units of the bid/ask width."""
    kind = ModelKind.parse(kind)
    spec = theta.time_change(kind)
    x_path = np.asarray(x_path, dtype=float)
    pricer = CdsPricer(spec, theta.sigma, theta.beta_q, theta.recovery, panel.tenors, premium_dt,
                       x_hi=max(4.0, float(np.nanmax(x_path)) + 0.5))
    fitted = model_spreads(pricer, x_path, as_curve_list(curves, panel.n_dates))
    return rmse_of(fitted, panel.spreads, panel.widths)


def rmse_of(fitted, quoted, widths) -> float:
    fitted, quoted, widths = (np.asarray(a, dtype=float) for a in (fitted, quoted, widths))
    ok = np.isfinite(quoted)
    if np.any(widths[ok] <= 0):
        raise ValueError("widths must be positive")
    e = (fitted[ok] - quoted[ok]) / widths[ok]
    return float(math.sqrt(np.mean(e * e)))
