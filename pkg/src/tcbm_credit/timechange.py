"""Lévy time changes used to subordinate the log-leverage Brownian motion.

Three kinds are supported:

* ``VG``  -- gamma subordinator with drift, jump measure ``c exp(-z/a) / z``
* ``EXP`` -- compound Poisson with exponential jumps plus drift,
  jump measure ``c exp(-z/a) / a``
* ``BROWNIAN`` -- deterministic clock ``G_t = b t``

For the jump kinds the jump scale is always ``a = (1 - b) / c`` so that the
clock runs at unit average speed.  The Brownian kind carries an explicit speed
``b`` (``b = 1`` is plain Black-Cox; ``b < 1`` is the ``c -> 0`` limit of the
jump kinds with the same drift).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class TimeChangeKind(str, enum.Enum):
    VG = "VG"
    EXP = "EXP"
    BROWNIAN = "BROWNIAN"


@dataclass(frozen=True)
class TimeChangeSpec:
    """Immutable description of a time change.

    Parameters
    ----------
    kind : TimeChangeKind
    b : float
        Drift of the clock, in (0, 1].
    c : float
        Jump activity (per unit time).  Ignored for ``BROWNIAN``.
    """

    kind: TimeChangeKind
    b: float = 1.0
    c: float = 0.0

    def __post_init__(self):
        kind = TimeChangeKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if not 0.0 < self.b <= 1.0:
            raise ValueError(f"b must lie in (0, 1], got {self.b}")
        if kind is TimeChangeKind.BROWNIAN:
            object.__setattr__(self, "c", 0.0)
        else:
            if not self.c > 0.0:
                raise ValueError(f"c must be positive for {kind.value}, got {self.c}")
            if self.b == 1.0:
                raise ValueError("b = 1 leaves no room for jumps; use BROWNIAN")

    @classmethod
    def vg(cls, b: float, c: float) -> "TimeChangeSpec":
        return cls(TimeChangeKind.VG, b, c)

    @classmethod
    def exp(cls, b: float, c: float) -> "TimeChangeSpec":
        return cls(TimeChangeKind.EXP, b, c)

    @classmethod
    def brownian(cls, speed: float = 1.0) -> "TimeChangeSpec":
        return cls(TimeChangeKind.BROWNIAN, speed, 0.0)

    @property
    def a(self) -> float:
        """Mean jump scale ``(1 - b) / c`` (0 for the Brownian clock)."""
        if self.kind is TimeChangeKind.BROWNIAN:
            return 0.0
        return (1.0 - self.b) / self.c

    @property
    def mean_rate(self) -> float:
        """``E[G_1]``; equals 1 for the jump kinds."""
        if self.kind is TimeChangeKind.BROWNIAN:
            return self.b
        return self.b + self.c * self.a

    @property
    def var_rate(self) -> float:
        """``Var[G_1]``, the integral of ``z**2`` against the jump measure."""
        if self.kind is TimeChangeKind.VG:
            return self.c * self.a**2
        if self.kind is TimeChangeKind.EXP:
            return 2.0 * self.c * self.a**2
        return 0.0

    def with_c(self, c: float) -> "TimeChangeSpec":
        return TimeChangeSpec(self.kind, self.b, c)


@dataclass(frozen=True)
class TcbmParams:
    """Log-leverage dynamics ``X_t = x + sigma W(G_t) + beta sigma^2 G_t``.

    The same type serves both measures; under the pricing measure ``beta``
    holds the risk-neutral drift coefficient.
    """

    x: float
    sigma: float
    beta: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.x < 0:
            raise ValueError(f"x must be nonnegative, got {self.x}")

    def rescaled(self, lam: float) -> "TcbmParams":
        """The equivalent parameters ``(lam x, lam sigma, beta / lam)``."""
        return TcbmParams(lam * self.x, lam * self.sigma, self.beta / lam)

    def at(self, x: float) -> "TcbmParams":
        return TcbmParams(x, self.sigma, self.beta)


def _check_time(t):
    if np.any(np.asarray(t) < 0):
        raise ValueError("time must be nonnegative")


def laplace_exponent(spec: TimeChangeSpec, u, t):
    """Real Laplace exponent ``psi(u, t) = -log E[exp(-u G_t)]``.

    Vectorised over ``u`` and ``t`` (standard numpy broadcasting).
    """
    u = np.asarray(u, dtype=float)
    if np.any(u < 0):
        raise ValueError("u must be nonnegative")
    _check_time(t)
    t = np.asarray(t, dtype=float)
    b = spec.b
    if spec.kind is TimeChangeKind.BROWNIAN:
        out = t * b * u
    elif spec.kind is TimeChangeKind.VG:
        out = t * (b * u + spec.c * np.log1p(spec.a * u))
    else:
        au = spec.a * u
        out = t * (b * u + spec.c * au / (1.0 + au))
    return out[()] if out.ndim == 0 else out


def laplace_exponent_complex(spec: TimeChangeSpec, u, t):
    """Analytic continuation of :func:`laplace_exponent` to ``Re(u) >= 0``.

    The principal branch of the logarithm is used; on the right half-plane
    ``1 + a u`` never crosses the cut.
    """
    u = np.asarray(u, dtype=complex)
    if np.any(u.real < 0):
        raise ValueError("Re(u) must be nonnegative")
    _check_time(t)
    t = np.asarray(t, dtype=float)
    b = spec.b
    if spec.kind is TimeChangeKind.BROWNIAN:
        out = t * b * u
    elif spec.kind is TimeChangeKind.VG:
        out = t * (b * u + spec.c * np.log1p(spec.a * u))
    else:
        au = spec.a * u
        out = t * (b * u + spec.c * au / (1.0 + au))
    return out[()] if out.ndim == 0 else out


def sample_increment(spec: TimeChangeSpec, dt: float, rng: np.random.Generator, size=None):
    """Exact draw(s) of ``G_{t+dt} - G_t``.

    ``rng`` is a :class:`numpy.random.Generator`; the draw order is fixed so a
    seeded generator reproduces results exactly.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    drift = spec.b * dt
    if spec.kind is TimeChangeKind.BROWNIAN:
        if size is None:
            return drift
        return np.full(size, drift)
    if spec.kind is TimeChangeKind.VG:
        return drift + rng.gamma(spec.c * dt, spec.a, size=size)
    # compound Poisson: the sum of N iid Exp(a) jumps is Gamma(N, a)
    n = rng.poisson(spec.c * dt, size=size)
    jumps = rng.gamma(np.maximum(n, 1), spec.a, size=size)
    out = drift + np.where(n > 0, jumps, 0.0)
    return float(out) if size is None else out
