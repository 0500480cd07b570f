"""Plume emulation: EOF and convolutional-VAE reduction of dispersion plumes
with spatio-temporal Gaussian-process emulators of the reduced features."""

from .errors import (AngleUndeterminable, ConfigError, DimensionError, GpFitError,
                     GridMismatchError, NumericalError, RankDeficiencyError, SvdConvergenceError)
from .plume import GridSpec, Plume, PlumeSet, mse, read_plumeset, write_plumeset

__version__ = "0.1.0"

__all__ = ["AngleUndeterminable", "ConfigError", "DimensionError", "GpFitError",
           "GridMismatchError", "NumericalError", "RankDeficiencyError", "SvdConvergenceError",
           "GridSpec", "Plume", "PlumeSet", "mse", "read_plumeset", "write_plumeset"]
