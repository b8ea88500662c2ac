"""CityTFT: a desk-scale surrogate for urban building energy demand.

Predicts hourly heating/cooling trigger probabilities and quantile load
projections from static building covariates and hourly weather covariates.
"""

__version__ = "0.1.0"
