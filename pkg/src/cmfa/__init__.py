"""Bayesian causal factor analysis for mixed-type panel outcomes.

Fits a multivariate factor model to continuous, binomial and count panel
data, predicts potential untreated outcomes for treated units, and reports
causal effects with full posterior uncertainty.  Includes a synthetic-data
generator and an evaluation harness for simulation studies.
"""

from .rng import RngStream

__all__ = ["RngStream"]
__version__ = "0.1.0"
