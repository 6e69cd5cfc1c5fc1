"""Deterministic simulator for ADMM-based personalized federated learning."""

__version__ = "0.1.0"
