"""Voting and stacking ensembles over the n-best lists of extractive QA models."""

__version__ = "0.1.0"
