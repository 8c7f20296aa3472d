"""Aleatoric/epistemic uncertainty for pulse-signal classifiers and regressors."""

__version__ = "0.1.0"
