"""Parameter containers shared by the filter, the estimator and the CLI."""
from __future__ import annotations

import enum
from dataclasses import dataclass, fields, replace

from .timechange import TcbmParams, TimeChangeKind, TimeChangeSpec


class ModelKind(str, enum.Enum):
    VG = "vg"
    EXP = "exp"
    BLACKCOX = "blackcox"

    @classmethod
    def parse(cls, s) -> "ModelKind":
        if isinstance(s, cls):
            return s
        key = str(s).strip().lower().replace("-", "").replace("_", "")
        aliases = {"bc": "blackcox", "brownian": "blackcox"}
        return cls(aliases.get(key, key))


@dataclass(frozen=True)
class ModelParams:
    """Free parameters ``(c, beta_q, recovery, eta)`` plus the frozen ``(sigma, beta, b)``.

    ``c`` is ignored by the Black-Cox model, whose clock runs at the constant
    speed ``b``.
    """

    c: float
    beta_q: float
    recovery: float
    eta: float
    sigma: float = 0.3
    beta: float = -0.5
    b: float = 0.2

    FREE = ("c", "beta_q", "recovery", "eta")

    def time_change(self, kind: ModelKind) -> TimeChangeSpec:
        kind = ModelKind.parse(kind)
        if kind is ModelKind.VG:
            return TimeChangeSpec(TimeChangeKind.VG, self.b, self.c)
        if kind is ModelKind.EXP:
            return TimeChangeSpec(TimeChangeKind.EXP, self.b, self.c)
        return TimeChangeSpec.brownian(self.b)

    def physical(self, x: float = 0.0) -> TcbmParams:
        return TcbmParams(x, self.sigma, self.beta)

    def risk_neutral(self, x: float = 0.0) -> TcbmParams:
        return TcbmParams(x, self.sigma, self.beta_q)

    def free_names(self, kind: ModelKind) -> tuple:
        if ModelKind.parse(kind) is ModelKind.BLACKCOX:
            return self.FREE[1:]
        return self.FREE

    def free_vector(self, kind: ModelKind) -> list:
        return [getattr(self, k) for k in self.free_names(kind)]

    def with_free(self, kind: ModelKind, values) -> "ModelParams":
        return replace(self, **dict(zip(self.free_names(kind), (float(v) for v in values))))

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# admissible box for the free parameters
DEFAULT_BOUNDS = {
    "c": (1e-3, 10.0),
    "beta_q": (-5.0, -1e-3),
    "recovery": (0.0, 0.95),
    "eta": (1e-3, 20.0),
}
