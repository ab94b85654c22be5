"""Optimal phase estimation when the measurement may abstain."""

__version__ = "0.1.0"
