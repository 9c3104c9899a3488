"""peakcast: forecasting single-target multivariate series with extreme events."""

__version__ = "0.1.0"
