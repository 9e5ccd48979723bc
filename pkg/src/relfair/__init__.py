"""Relative-fairness federated learning: ambiguity sets, primal-dual training, exact oracles."""

__version__ = "0.1.0"
