"""Finite mixtures of canonical fundamental skew t distributions fitted by EM."""

__version__ = "0.1.0"

from .em import FitConfig, FitResult, fit
from .model import (
    CfustParams,
    MixtureParams,
    SkewStructure,
    cfust_logpdf,
    mixture_logpdf,
    sample_cfust,
    sample_mixture,
)
from .specfun import CdfPrecision

__all__ = [
    "CdfPrecision",
    "CfustParams",
    "FitConfig",
    "FitResult",
    "MixtureParams",
    "SkewStructure",
    "cfust_logpdf",
    "fit",
    "mixture_logpdf",
    "sample_cfust",
    "sample_mixture",
]
