"""Recommendation unlearning with selective, collaborative influence updates."""

__version__ = "0.1.0"
