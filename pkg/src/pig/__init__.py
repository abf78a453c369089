"""Prediction-intervention games on structural causal models."""

__version__ = "0.1.0"
