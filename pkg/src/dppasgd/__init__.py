"""Differentially private periodic-averaging SGD: simulator, accountant and planner."""

__version__ = "0.1.0"
