"""Gradient-based online coreset selection and replay for continual learning."""

__version__ = "0.1.0"
