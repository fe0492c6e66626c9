"""Federated RLHF simulator: local reward-shaped RL on each client, delta
aggregation on a server, and calculators/checks for the accompanying
convergence and personalization bounds."""

__version__ = "0.1.0"
