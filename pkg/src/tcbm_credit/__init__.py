"""Structural credit model with Lévy time-changed Brownian motion: first-passage
survival by FFT, CDS pricing, linearized filtering and maximum likelihood."""

from .timechange import TcbmParams, TimeChangeKind, TimeChangeSpec, laplace_exponent
from .firstpassage import NumericalError, choose_grid, conditional_density, conditional_moments, survival_at
from .pricing import CdsContractSpec, CdsPricer, ZeroCurve, cds_spread, invert_cds
from .model import ModelKind, ModelParams

__all__ = [
    "TcbmParams", "TimeChangeKind", "TimeChangeSpec", "laplace_exponent", "NumericalError", "choose_grid",
    "conditional_density", "conditional_moments", "survival_at", "CdsContractSpec", "CdsPricer", "ZeroCurve",
    "cds_spread", "invert_cds", "ModelKind", "ModelParams",
]
