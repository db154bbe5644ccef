"""Gradient inversion lab: federated simulator, verifiable attack, CTP baseline."""

__version__ = "0.1.0"
