"""Subsampling pseudo-marginal MCMC with the difference estimator."""

from diffpmcmc.errors import NumericalError, ValidationError

__version__ = "0.1.0"

__all__ = ["NumericalError", "ValidationError", "__version__"]
