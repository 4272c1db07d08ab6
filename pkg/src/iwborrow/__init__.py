"""Individually weighted power priors for subgroup analyses of trials with external data."""

__version__ = "0.1.0"
