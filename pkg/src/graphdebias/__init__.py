"""Debiased graph classification with learned causal/bias edge masks."""

__version__ = "0.1.0"
