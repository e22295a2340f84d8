"""Interpretable cooperative multi-agent Q-learning with additive shape-function mixers."""

__version__ = "0.1.0"
