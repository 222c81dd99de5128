"""Causal state representations for offline reinforcement-learning recommenders."""

__version__ = "0.1.0"
