"""Nonparametric deconvolution models: simulate, fit, evaluate."""

__version__ = "0.1.0"

from .model import Dataset, GroundTruth, Hyperparameters, LatentPoint  # noqa: F401
from .report import FitReport  # noqa: F401
from .splitmerge import fit_nonparametric  # noqa: F401
from .state import VariationalState  # noqa: F401
from .vi import FitOptions, fit_parametric  # noqa: F401
