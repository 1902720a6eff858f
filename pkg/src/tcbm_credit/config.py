"""Run configuration: built-in defaults < TOML file < command-line flags."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import tomli

from .data import DataError
from .filtering import FilterMode
from .model import DEFAULT_BOUNDS, ModelKind, ModelParams
from .pricing import DEFAULT_TENORS

# config-file key -> ModelParams field
_INIT_KEYS = {"c0": "c", "betaQ0": "beta_q", "R0": "recovery", "eta0": "eta"}


@dataclass
class RunConfig:
    model: ModelKind = ModelKind.VG
    sigma: float = 0.3
    beta: float = -0.5
    b: float = 0.2
    c0: float = 1.0
    betaQ0: float = -1.5
    R0: float = 0.6
    eta0: float = 1.5
    bounds: dict = field(default_factory=lambda: dict(DEFAULT_BOUNDS))
    eps_fft: float = 1e-10
    premium_dt: float = 0.25
    tenors: tuple = DEFAULT_TENORS
    seed: int = 42
    filter_mode: FilterMode = FilterMode.TRUNCATED
    threads: int = 1
    cds: str | None = None
    treasury: str | None = None
    out_dir: str = "."

    def __post_init__(self):
        self.model = ModelKind.parse(self.model)
        if not isinstance(self.filter_mode, FilterMode):
            self.filter_mode = FilterMode(str(self.filter_mode).upper())
        self.tenors = tuple(float(t) for t in self.tenors)
        for name, (lo, hi) in self.bounds.items():
            if name not in DEFAULT_BOUNDS:
                raise DataError(f"unknown bound {name!r}")
            if not lo < hi:
                raise DataError(f"bounds.{name}: lower {lo} must be below upper {hi}")
        if self.sigma <= 0:
            raise DataError("sigma must be positive")
        if not 0 < self.b <= 1:
            raise DataError("b must lie in (0, 1]")
        if self.threads < 1:
            raise DataError("threads must be at least 1")
        for key in ("cds", "treasury"):
            p = getattr(self, key)
            if p is not None and not Path(p).is_file():
                raise DataError(f"{key} file {p} does not exist")

    def initial_params(self) -> ModelParams:
        return ModelParams(self.c0, self.betaQ0, self.R0, self.eta0, self.sigma, self.beta, self.b)

    def with_overrides(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.value
        d["filter_mode"] = self.filter_mode.value
        d["tenors"] = list(self.tenors)
        return d


def load_config(path=None, **overrides) -> RunConfig:
    """Defaults, then the TOML file at ``path``, then non-None ``overrides``."""
    values: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomli.load(fh)
        except (OSError, tomli.TOMLDecodeError) as e:
            raise DataError(f"config {path}: {e}") from None
        known = set(RunConfig.__dataclass_fields__)
        for k, v in raw.items():
            if k == "bounds":
                if not isinstance(v, dict):
                    raise DataError("bounds must be a table")
                b = dict(DEFAULT_BOUNDS)
                b.update({name: tuple(float(a) for a in pair) for name, pair in v.items()})
                values["bounds"] = b
            elif k in known:
                values[k] = v
            else:
                raise DataError(f"config {path}: unknown key {k!r}")
    cfg = RunConfig(**values)
    return cfg.with_overrides(**overrides) if overrides else cfg
