"""Causal graph discovery, multi-graph spatio-temporal forecasting and
spatio-temporal conformal prediction for sensor networks."""

__version__ = "0.1.0"
