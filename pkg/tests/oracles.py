"""Independent reference implementations used only by the tests."""
from __future__ import annotations

import math

import numpy as np
from scipy import integrate, stats

from tcbm_credit.firstpassage import FftGrid, conditional_density
from tcbm_credit.timechange import TimeChangeKind, laplace_exponent


def survival_quad(spec, sigma, beta, t, x):
    """First-passage survival by adaptive quadrature of the sine integral."""
    if x <= 0:
        return 0.0
    s2 = sigma * sigma

    def f(u):
        d = u * u + beta * beta
        return u * math.sin(u * x) / d * math.exp(-laplace_exponent(spec, 0.5 * s2 * d, t))

    upper = 1.0
    while math.exp(-laplace_exponent(spec, 0.5 * s2 * upper * upper, t)) / upper > 1e-18:
        upper *= 2.0
    val, _ = integrate.quad(f, 0.0, upper, limit=4000, epsabs=1e-14, epsrel=1e-13)
    out = 2.0 * math.exp(-beta * x) / math.pi * val
    if beta > 0:
        out += 1.0 - math.exp(-2.0 * beta * x)
    return out


def survival_quad_beta0(spec, sigma, t, x):
    s2 = sigma * sigma

    def f(u):
        return math.sin(u * x) / u * math.exp(-laplace_exponent(spec, 0.5 * s2 * u * u, t))

    val, _ = integrate.quad(f, 0.0, 400.0 / (sigma * math.sqrt(t)) + 50, limit=4000, epsabs=1e-14)
    return 2.0 * val / math.pi


def moments_quad(spec, sigma, beta, t, x):
    """Killed moments ``E[X_t^j; no default]`` for j = 0, 1, 2 by quadrature."""
    s2 = sigma * sigma
    out = []
    for w in (lambda d: 1.0 / d, lambda d: -2.0 * beta / d**2,
              lambda d: 8.0 * beta**2 / d**3 - 2.0 / d**2):
        def f(u, w=w):
            d = u * u + beta * beta
            return u * math.sin(u * x) * w(d) * math.exp(-laplace_exponent(spec, 0.5 * s2 * d, t))

        upper = 1.0
        while math.exp(-laplace_exponent(spec, 0.5 * s2 * upper * upper, t)) / upper > 1e-18:
            upper *= 2.0
        val, _ = integrate.quad(f, 0.0, upper, limit=4000, epsabs=1e-15, epsrel=1e-13)
        out.append(2.0 * math.exp(-beta * x) / math.pi * val)
    return np.array(out)


def killed_cf_quad(spec, sigma, beta, t, x, k):
    """``E[exp(i k X_t); no default]`` by quadrature over the sine spectrum (beta < 0)."""
    s2 = sigma * sigma
    w = (beta + 1j * k) ** 2

    def part(u, which):
        d = u * u + beta * beta
        v = u * math.sin(u * x) / (u * u + w) * math.exp(-laplace_exponent(spec, 0.5 * s2 * d, t))
        return v.real if which == 0 else v.imag

    upper = 1.0
    while math.exp(-laplace_exponent(spec, 0.5 * s2 * upper * upper, t)) / upper > 1e-18:
        upper *= 2.0
    re = integrate.quad(part, 0.0, upper, args=(0,), limit=4000, epsabs=1e-15, epsrel=1e-14)[0]
    im = integrate.quad(part, 0.0, upper, args=(1,), limit=4000, epsabs=1e-15, epsrel=1e-14)[0]
    return 2.0 * math.exp(-beta * x) / math.pi * complex(re, im)


def black_cox_survival(sigma, beta, t, x):
    """Drifted Brownian motion ``x + sigma W_t + beta sigma^2 t`` staying above 0."""
    s = sigma * math.sqrt(t)
    m = beta * sigma * sigma * t
    return stats.norm.cdf((x + m) / s) - math.exp(-2.0 * beta * x) * stats.norm.cdf((-x + m) / s)


def black_cox_density(sigma, beta, t, x, y):
    """Density of the killed drifted Brownian motion at ``y``, conditioned on survival."""
    s = sigma * math.sqrt(t)
    m = beta * sigma * sigma * t
    y = np.asarray(y, dtype=float)
    raw = (stats.norm.pdf((y - x - m) / s) - math.exp(-2.0 * beta * x) * stats.norm.pdf((y + x - m) / s)) / s
    return raw / black_cox_survival(sigma, beta, t, x)


def cds_spread_quad(spec, sigma, beta_q, curve, recovery, tenor, premium_dt, x):
    """Par spread with every survival probability from :func:`survival_quad`."""
    from tcbm_credit.pricing import discount

    n = int(round(tenor / premium_dt))
    t = premium_dt * np.arange(1, n + 1)
    b = np.array([discount(curve, s) for s in t])
    if spec.kind is TimeChangeKind.BROWNIAN:
        p = np.array([black_cox_survival(sigma * math.sqrt(spec.b), beta_q / spec.b, s, x) for s in t])
    else:
        p = np.array([survival_quad(spec, sigma, beta_q, s, x) for s in t])
    prot = sum((1 - p[k]) * (b[k] - b[k + 1]) for k in range(n - 1)) + b[-1] * (1 - p[-1])
    prem = premium_dt * float(p @ b)
    return (1.0 - recovery) * prot / prem


def grid_filter_loglik(meas_list, eta, spec, sigma, beta, dt, x_hi=2.0, n_points=4096, lower_tail=1e-300):
    """Brute-force filter on a uniform x-grid with the exact killed transition.

    ``meas_list`` holds one :class:`MeasurementVector` per date.  The
    transition from each grid node is the killed density (survival times the
    conditional density) evaluated on the same grid, obtained from
    :func:`conditional_density` on a lattice whose nodes are the grid nodes.
    """
    u_bar = n_points * math.pi / x_hi
    n = 1
    while n * math.pi / u_bar < 2.0 * x_hi + 3.0:
        n *= 2
    n *= 2
    grid = FftGrid.from_ubar(n, u_bar, x_hi=x_hi)
    y = grid.x[: grid.n_usable]
    h = y[1] - y[0]
    params = None
    from tcbm_credit.timechange import TcbmParams

    def meas_logdens(m):
        v = m.valid
        xt, sd = m.x_tilde[v], eta * m.w_tilde[v]
        out = np.zeros_like(y)
        for a, s in zip(xt, sd):
            out += -0.5 * ((y - a) / s) ** 2 - math.log(s) - 0.5 * math.log(2 * math.pi)
        return out - np.log(np.abs(m.slope[v])).sum()

    rows = {}

    def row(i):
        if i not in rows:
            d = conditional_density(spec, TcbmParams(y[i], sigma, beta), dt, y[i], grid=grid)
            rows[i] = d.survival * d.values * h
        return rows[i]

    logc = 0.0
    dens = None
    for k, m in enumerate(meas_list):
        ld = meas_logdens(m)
        if dens is None:
            ld[0] = -np.inf
            top = ld.max()
            dens = np.exp(ld - top)
            logc = top
        else:
            new = np.zeros_like(y)
            keep = np.flatnonzero(dens > lower_tail * dens.max())
            keep = keep[keep > 0]
            for i in keep:
                new += dens[i] * row(i)
            top = ld.max()
            dens = new * np.exp(ld - top)
            logc += top
        mass = dens.sum() * h
        logc += math.log(mass)
        dens /= mass
    return logc
