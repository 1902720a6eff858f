"""Survival probabilities, killed densities and moments for first passage of
the second kind, evaluated by Fourier sums on an equispaced u-lattice.

All quantities are sums over the same lattice ``u(k) = -u_bar + k eta``.  On the
reciprocal x-lattice ``x(l) = l pi / u_bar`` the sums are one FFT; elsewhere
the identical sum is evaluated directly (half lattice, sine form), so lattice
and off-lattice values agree to rounding.

The pole of ``1 / (u^2 + beta^2)`` at ``u = +-i|beta|`` makes the x-space
functions decay only like ``exp(-|beta| x)``, which the periodic sum aliases.
That leading term is known in closed form (it is the no-default asymptote of
each quantity) and is subtracted exactly; what remains aliases like the
default probability itself, which decays much faster.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate, optimize

from .timechange import TcbmParams, TimeChangeKind, TimeChangeSpec, laplace_exponent

U_BAR_FLOOR = 300.0
N_MIN = 2**8
N_MAX = 2**14
IMAG_WARN = 1e-8
IMAG_FAIL = 1e-6
CLAMP_TOL = 1e-8
NORM_FAIL = 1e-4
# finer y-spacing for densities: the trapezoid endpoint error scales as spacing^2
DENSITY_U_BAR = 1200.0
DENSITY_TAIL = 1e-9


class NumericalError(ArithmeticError):
    """A lattice computation left its accuracy envelope."""


@dataclass(frozen=True)
class FftGrid:
    """Lattice pair for the Fourier sums.

    ``x_hi`` is the largest x the grid was sized for; values above it are not
    reported.
    """

    n: int
    eta: float
    x_hi: float = field(default=None)

    def __post_init__(self):
        if self.n < 4 or self.n & (self.n - 1):
            raise ValueError(f"n must be a power of two, got {self.n}")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.x_hi is None:
            object.__setattr__(self, "x_hi", 0.5 * self.x_max)
        if not 0 < self.x_hi <= self.x_max:
            raise ValueError("x_hi must lie in (0, x_max]")

    @classmethod
    def from_ubar(cls, n: int, u_bar: float, x_hi: float | None = None) -> "FftGrid":
        return cls(n, 2.0 * u_bar / n, x_hi)

    @property
    def u_bar(self) -> float:
        return self.n * self.eta / 2.0

    @property
    def eta_star(self) -> float:
        return 2.0 * math.pi / (self.n * self.eta)

    @property
    def x_max(self) -> float:
        return self.n * self.eta_star

    @property
    def u(self) -> np.ndarray:
        return -self.u_bar + self.eta * np.arange(self.n)

    @property
    def x(self) -> np.ndarray:
        return self.eta_star * np.arange(self.n)

    @property
    def n_usable(self) -> int:
        """Number of x-lattice nodes in ``[0, x_hi]``."""
        return int(math.floor(self.x_hi / self.eta_star + 1e-9)) + 1


@dataclass(frozen=True)
class SurvivalCurve:
    t: float
    x: np.ndarray
    values: np.ndarray
    grid: FftGrid


@dataclass(frozen=True)
class ConditionalDensity:
    """Density of ``X_t`` given no default, on the y-lattice ``[0, x_hi]``."""

    y: np.ndarray
    values: np.ndarray
    survival: float


# ----------------------------------------------------------------------------
# grid sizing


def _default_prob_bound(spec: TimeChangeSpec, sigma: float, beta: float, z: float, t: float) -> float:
    """Chernoff bound on the probability of default within ``t`` from ``z``.

    Uses the exponential martingale of the drifted Brownian motion and the
    moment generating function of the clock, finite below ``1 / a``.
    """
    if z <= 0:
        return 1.0
    s2 = sigma * sigma
    cap = 1.0 / spec.a if spec.kind is not TimeChangeKind.BROWNIAN else np.inf

    def kappa(th):
        return 0.5 * th * th * s2 - th * beta * s2

    def log_mgf(k):
        # log E[exp(k G_t)] for 0 <= k < 1/a
        b, c, a = spec.b, spec.c, spec.a
        if spec.kind is TimeChangeKind.BROWNIAN:
            return t * b * k
        if spec.kind is TimeChangeKind.VG:
            return t * (b * k - c * math.log1p(-a * k))
        return t * (b * k + a * c * k / (1.0 - a * k))

    # largest theta with kappa(theta) < cap
    if np.isfinite(cap):
        th_hi = (beta * s2 + math.sqrt(beta * beta * s2 * s2 + 2.0 * s2 * cap * 0.999)) / s2
    else:
        th_hi = 50.0 * (z + 1.0) / (s2 * max(t, 1e-12))

    def objective(th):
        return -th * z + log_mgf(max(kappa(th), 0.0))

    res = optimize.minimize_scalar(objective, bounds=(1e-12, th_hi), method="bounded")
    return float(min(1.0, math.exp(min(res.fun, 0.0))))


def _ubar_for(spec, sigma, t_min, eps):
    def envelope(u):
        return -laplace_exponent(spec, 0.5 * sigma**2 * u * u, t_min) - math.log(u) - math.log(eps)

    if envelope(U_BAR_FLOOR) <= 0:
        return U_BAR_FLOOR
    hi = 2.0 * U_BAR_FLOOR
    while envelope(hi) > 0:
        hi *= 2.0
        if hi > 1e8:
            raise ValueError("could not size u_bar; horizon too short")
    return float(optimize.brentq(envelope, U_BAR_FLOOR, hi))


def choose_grid(spec: TimeChangeSpec, params: TcbmParams, t, eps: float = 1e-10,
                x_max: float = 3.0, u_bar_min: float = U_BAR_FLOOR) -> FftGrid:
    """Size a lattice for horizons ``t`` (scalar or sequence) and ``x <= x_max``.

    ``u_bar`` is the smallest value (at least 300) for which the integrand
    envelope ``exp(-psi(sigma^2 u^2/2, t_min)) / u`` falls below ``eps``.  ``n``
    is the smallest power of two keeping the residual aliasing term
    ``exp(-|beta| (L - 2x)) D(L - x, t_max)`` below ``eps``, with ``L`` the
    x-period and ``D`` bounded by a Chernoff estimate.

    ``u_bar_min`` raises the floor on ``u_bar``, which refines the x-lattice
    spacing ``pi / u_bar``.
    """
    if not 1e-14 < eps < 1e-4:
        raise ValueError("eps must lie in (1e-14, 1e-4)")
    beta = params.beta
    if beta >= 0:
        raise ValueError("automatic grid sizing requires beta < 0; supply a grid")
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(ts <= 0):
        raise ValueError("horizons must be positive")
    t_min, t_max = float(ts.min()), float(ts.max())
    sigma = params.sigma
    u_bar = max(_ubar_for(spec, sigma, t_min, eps), float(u_bar_min))
    n = N_MIN
    while n <= N_MAX:
        period = n * math.pi / u_bar
        z = period - x_max
        if z > x_max:
            bound = (1.0 + period * period) * math.exp(-abs(beta) * (period - 2.0 * x_max))
            bound *= _default_prob_bound(spec, sigma, beta, z, t_max)
            if bound <= eps:
                return FftGrid.from_ubar(n, u_bar, x_hi=x_max)
        n *= 2
    raise ValueError(f"no lattice size up to {N_MAX} meets eps={eps} for x_max={x_max}")


# ----------------------------------------------------------------------------
# kernels


@lru_cache(maxsize=512)
def _kernel(spec: TimeChangeSpec, sigma: float, beta: float, times: tuple, n: int, eta: float):
    """``exp(-psi(sigma^2 (u^2 + beta^2) / 2, t))`` on the full lattice, one row per t."""
    u = -n * eta / 2.0 + eta * np.arange(n)
    arg = 0.5 * sigma * sigma * (u * u + beta * beta)
    out = np.exp(-laplace_exponent(spec, arg[None, :], np.asarray(times)[:, None]))
    out.setflags(write=False)
    return out


def _alias_sums(q):
    r = 1.0 - q
    return q / r, q / (r * r), q * (1.0 + q) / (r * r * r)


def _alias_correction(x, beta, period, poly):
    """Periodic images of ``pi sign(z) exp(-|beta||z|) p(|z|)``, already scaled
    by ``exp(-beta x) / pi`` and with sign flipped, i.e. the amount to add.

    ``poly`` holds coefficients ``(c0, c1, c2)`` of ``p(s) = c0 + c1 s + c2 s^2``;
    each may broadcast against ``x``.
    """
    if beta == 0:
        return 0.0
    ab = abs(beta)
    q = math.exp(-ab * period)
    s0, s1, s2 = _alias_sums(q)
    c0, c1, c2 = poly
    L = period
    plus = c0 * s0 + c1 * (x * s0 + L * s1) + c2 * (x * x * s0 + 2 * x * L * s1 + L * L * s2)
    minus = c0 * s0 + c1 * (L * s1 - x * s0) + c2 * (L * L * s2 - 2 * x * L * s1 + x * x * s0)
    images = np.exp(-ab * x) * plus - np.exp(ab * x) * minus
    return -np.exp(-beta * x) * images


def _clamp(p, what="survival"):
    p = np.asarray(p, dtype=float)
    if np.any(p < -CLAMP_TOL) or np.any(p > 1.0 + CLAMP_TOL):
        bad = p[(p < -CLAMP_TOL) | (p > 1 + CLAMP_TOL)]
        raise NumericalError(f"{what} outside [0, 1] beyond tolerance: {bad[:3]}")
    return np.clip(p, 0.0, 1.0)


# ----------------------------------------------------------------------------
# survival


class SurvivalEngine:
    """Survival probabilities for a fixed model on a set of horizons.

    Evaluates ``P(t_i, x)`` and ``dP/dx`` at arbitrary x by the direct sine
    sum, and on the whole x-lattice by FFT.  Both share one precomputed
    coefficient table, so this is what pricing and filtering use in loops.
    """

    def __init__(self, spec: TimeChangeSpec, sigma: float, beta: float, times, grid: FftGrid,
                 trim: float = 1e-18):
        self.spec = spec
        self.sigma = float(sigma)
        self.beta = float(beta)
        self.times = tuple(float(t) for t in np.atleast_1d(times))
        if any(t <= 0 for t in self.times):
            raise ValueError("horizons must be positive")
        self.grid = grid
        n, eta = grid.n, grid.eta
        self._kern = _kernel(spec, self.sigma, self.beta, self.times, n, eta)
        # half lattice u_j = j eta, j = 1..n/2; the endpoint u_bar appears once
        half = n // 2
        k = self._kern[:, half + 1:]
        k_end = self._kern[:, :1]
        kh = np.concatenate([k, k_end], axis=1)
        uj = eta * np.arange(1, half + 1)
        wj = np.full(half, 2.0)
        wj[-1] = 1.0
        coef = (eta / math.pi) * wj * uj / (uj * uj + self.beta**2) * kh
        scale = np.max(np.abs(coef)) or 1.0
        keep = np.max(np.abs(coef), axis=0) * np.maximum(uj, 1.0) > trim * scale
        self._u = uj[keep]
        self._coef = coef[:, keep]
        self._k0 = self._kern[:, half]  # u = 0 column, only used when beta == 0
        self._period = grid.x_max

    def _check_x(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x < 0) or np.any(x > self.grid.x_hi * (1 + 1e-12)):
            raise ValueError(f"x outside [0, {self.grid.x_hi:.6g}]")
        return x

    def _raw(self, x):
        ux = np.multiply.outer(self._u, x)
        s = self._coef @ np.sin(ux)
        return s, ux

    def values(self, x, clamp: bool = True) -> np.ndarray:
        """``P(t_i, x)`` with shape ``(len(times),) + x.shape``."""
        x = self._check_x(x)
        xf = x.reshape(-1)
        s, _ = self._raw(xf)
        beta = self.beta
        p = np.exp(-beta * xf) * s
        p = p + _alias_correction(xf, beta, self._period, (1.0, 0.0, 0.0))
        if beta == 0:
            p = p + (self.grid.eta / math.pi) * self._k0[:, None] * xf
        elif beta > 0:
            p = p + (1.0 - np.exp(-2.0 * beta * xf))
        p = p.reshape((len(self.times),) + x.shape)
        return _clamp(p) if clamp else p

    def slopes(self, x) -> np.ndarray:
        """``dP(t_i, x)/dx``, same shape convention as :meth:`values`."""
        return self.values_and_slopes(x)[1]

    def values_and_slopes(self, x, clamp: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """:meth:`values` and :meth:`slopes` sharing one pass over the lattice."""
        x = self._check_x(x)
        xf = x.reshape(-1)
        beta = self.beta
        ux = np.multiply.outer(self._u, xf)
        sin, cos = np.sin(ux), np.cos(ux)
        s = self._coef @ sin
        ds = self._coef @ (self._u[:, None] * cos)
        e = np.exp(-beta * xf)
        p = e * s + _alias_correction(xf, beta, self._period, (1.0, 0.0, 0.0))
        d = e * (ds - beta * s)
        if beta != 0:
            ab = abs(beta)
            q = math.exp(-ab * self._period)
            r = q / (1.0 - q)
            d = d + 2.0 * r * e * (ab * np.cosh(ab * xf) - beta * np.sinh(ab * xf))
        if beta == 0:
            p = p + (self.grid.eta / math.pi) * self._k0[:, None] * xf
            d = d + (self.grid.eta / math.pi) * self._k0[:, None]
        elif beta > 0:
            p = p + (1.0 - np.exp(-2.0 * beta * xf))
            d = d + 2.0 * beta * np.exp(-2.0 * beta * xf)
        shape = (len(self.times),) + x.shape
        p = p.reshape(shape)
        return (_clamp(p) if clamp else p), d.reshape(shape)

    def lattice(self) -> tuple[np.ndarray, np.ndarray]:
        """FFT evaluation on the x-lattice nodes in ``[0, x_hi]``.

        Returns ``(x, P)`` with ``P`` of shape ``(len(times), m)``.
        """
        g = self.grid
        n = g.n
        u = g.u
        denom = u * u + self.beta**2
        with np.errstate(invalid="ignore", divide="ignore"):
            a = np.where(denom > 0, u / denom, 0.0) * self._kern
        m = g.n_usable
        x = g.x[:m]
        sign = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
        sums = (n * np.fft.ifft(a, axis=1) * sign)[:, :m]
        val = -1j * g.eta * np.exp(-self.beta * x) / math.pi * sums
        resid = np.max(np.abs(val.imag)) if val.size else 0.0
        if resid > IMAG_FAIL:
            raise NumericalError(f"imaginary residue {resid:.2e}; lattice mis-sized")
        p = val.real + _alias_correction(x, self.beta, self._period, (1.0, 0.0, 0.0))
        if self.beta == 0:
            p = p + (g.eta / math.pi) * self._k0[:, None] * x
        elif self.beta > 0:
            p = p + (1.0 - np.exp(-2.0 * self.beta * x))
        return x, _clamp(p)


def survival_lattice(spec: TimeChangeSpec, params: TcbmParams, t: float, grid: FftGrid) -> SurvivalCurve:
    """``P(t, x)`` at every x-lattice node up to ``grid.x_hi`` via one FFT."""
    if not t > 0:
        raise ValueError("t must be positive")
    eng = SurvivalEngine(spec, params.sigma, params.beta, [t], grid)
    x, p = eng.lattice()
    return SurvivalCurve(float(t), x, p[0], grid)


def survival_at(spec: TimeChangeSpec, params: TcbmParams, t: float, x=None,
                grid: FftGrid | None = None):
    """Survival probability at arbitrary ``x`` (defaults to ``params.x``).

    Uses the same lattice sum as :func:`survival_lattice`, evaluated directly,
    so it reproduces lattice values at the nodes.
    """
    if x is None:
        x = params.x
    if grid is None:
        xm = max(3.0, float(np.max(x)))
        grid = choose_grid(spec, params, t, x_max=xm)
    eng = SurvivalEngine(spec, params.sigma, params.beta, [t], grid)
    out = eng.values(x)[0]
    return float(out) if np.ndim(out) == 0 else out


# ----------------------------------------------------------------------------
# killed density and moments


def conditional_density(spec: TimeChangeSpec, params: TcbmParams, t: float, x: float | None = None,
                        grid: FftGrid | None = None) -> ConditionalDensity:
    """Density of ``X_t`` conditioned on no default, started at ``x``.

    Uses ``exp(beta (y - x)) / (pi P) * int sin(u y) sin(u x) kernel du`` on the
    y-lattice (one FFT for any start ``x``).  Without an explicit grid the
    y-range is widened until the mass beyond it is below ``DENSITY_TAIL``.
    """
    if x is None:
        x = params.x
    if x < 0:
        raise ValueError("x must be nonnegative")
    if grid is not None:
        return _density_on(spec, params, t, x, grid)
    y_max = max(3.0, 2.0 * x)
    while True:
        grid = choose_grid(spec, params, t, x_max=y_max, u_bar_min=DENSITY_U_BAR)
        out = _density_on(spec, params, t, x, grid, check=False)
        if _tail_mass(out.y, out.values) <= DENSITY_TAIL or y_max >= 64.0:
            return _checked(out)
        y_max *= 2.0


def _tail_mass(y, rho):
    # exponential extrapolation from the last two lattice nodes
    r1, r0 = rho[-1], rho[-2]
    if r1 <= 0.0:
        return 0.0
    if r0 <= r1:
        # flat or rising: roundoff floor, or a tail not yet decaying
        return r1 * y[-1]
    return r1 * (y[-1] - y[-2]) / math.log(r0 / r1)


def _checked(dens):
    total = density_mass(dens)
    if abs(total - 1.0) > NORM_FAIL:
        raise NumericalError(f"conditional density integrates to {total:.6f}; grid too small")
    return dens


def density_mass(dens: ConditionalDensity) -> float:
    """Total mass of a lattice density (Simpson's rule)."""
    return float(integrate.simpson(dens.values, x=dens.y))


def _density_on(spec, params, t, x, grid, check=True):
    eng = SurvivalEngine(spec, params.sigma, params.beta, [t], grid)
    surv = float(eng.values(x)[0])
    if surv <= 1e-12:
        raise NumericalError(f"survival {surv:.2e} too small to condition on")
    n = grid.n
    kern = eng._kern[0]
    b = np.sin(grid.u * x) * kern
    sign = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    m = grid.n_usable
    y = grid.x[:m]
    s = (n * np.fft.ifft(b) * sign)[:m].imag
    rho = np.exp(params.beta * (y - x)) * grid.eta / (math.pi * surv) * s
    rho = np.maximum(rho, 0.0)
    rho[0] = 0.0
    out = ConditionalDensity(y, rho, surv)
    return _checked(out) if check else out


class MomentEngine:
    """Killed moments ``E_x[X_t^j ; no default]`` for ``j = 0, 1, 2``.

    The k-derivatives of the conditional characteristic function at ``k = 0``
    are taken analytically under the integral:

    * ``j = 0``: ``u sin(ux) / D``
    * ``j = 1``: ``-2 beta u sin(ux) / D^2``
    * ``j = 2``: ``u sin(ux) (8 beta^2 / D^3 - 2 / D^2)``

    with ``D = u^2 + beta^2``.  Requires ``beta < 0``.
    """

    def __init__(self, spec: TimeChangeSpec, sigma: float, beta: float, dt: float, grid: FftGrid):
        if not beta < 0:
            raise ValueError("killed moments are implemented for beta < 0 only")
        self.spec, self.sigma, self.beta, self.dt, self.grid = spec, float(sigma), float(beta), float(dt), grid
        kern = _kernel(spec, self.sigma, self.beta, (self.dt,), grid.n, grid.eta)[0]
        half = grid.n // 2
        kh = np.concatenate([kern[half + 1:], kern[:1]])
        eta = grid.eta
        uj = eta * np.arange(1, half + 1)
        wj = np.full(half, 2.0)
        wj[-1] = 1.0
        d = uj * uj + self.beta**2
        base = (eta / math.pi) * wj * uj * kh
        coef = np.stack([base / d, -2.0 * self.beta * base / d**2,
                         base * (8.0 * self.beta**2 / d**3 - 2.0 / d**2)])
        scale = np.max(np.abs(coef), axis=1, keepdims=True)
        keep = np.max(np.abs(coef) / scale, axis=0) * np.maximum(uj, 1.0) > 1e-18
        self._u = uj[keep]
        self._coef = coef[:, keep]
        s2 = self.sigma**2
        drift = self.beta * s2 * spec.mean_rate * self.dt
        var = s2 * spec.mean_rate * self.dt + self.beta**2 * s2 * s2 * spec.var_rate * self.dt
        self._polys = [(1.0, 0.0, 0.0), (drift, 1.0, 0.0), (drift * drift + var, 2.0 * drift, 1.0)]

    def moments(self, x) -> np.ndarray:
        """Array of shape ``(3,) + x.shape``: ``[M0, M1, M2]``; zero for ``x <= 0``."""
        x = np.asarray(x, dtype=float)
        xf = np.maximum(x.reshape(-1), 0.0)
        if np.any(xf > self.grid.x_hi * (1 + 1e-12)):
            raise ValueError(f"x outside [0, {self.grid.x_hi:.6g}]")
        s = self._coef @ np.sin(np.multiply.outer(self._u, xf))
        out = np.exp(-self.beta * xf) * s
        for j, poly in enumerate(self._polys):
            out[j] += _alias_correction(xf, self.beta, self.grid.x_max, poly)
        out[:, xf <= 0] = 0.0
        return out.reshape((3,) + x.shape)


def conditional_moments(spec: TimeChangeSpec, params: TcbmParams, dt: float, x=None,
                        grid: FftGrid | None = None):
    """First two moments of ``X_dt`` given no default, started at ``x``.

    Returns ``(g1, g2)`` (floats, or arrays when ``x`` is an array).
    """
    if x is None:
        x = params.x
    if params.beta >= 0:
        raise ValueError("conditional moments require beta < 0")
    if grid is None:
        grid = choose_grid(spec, params, dt, x_max=max(3.0, float(np.max(x))))
    m = MomentEngine(spec, params.sigma, params.beta, dt, grid).moments(x)
    if np.any(m[0] <= 1e-12):
        raise NumericalError("survival too small to condition on")
    g1 = m[1] / m[0]
    g2 = m[2] / m[0]
    if np.any(g2 - g1 * g1 <= 0):
        raise NumericalError("conditional variance is not positive")
    if np.ndim(g1) == 0:
        return float(g1), float(g2)
    return g1, g2
