"""Simulation-grounded neural networks: simulators, synthetic datasets, a small
neural network engine, Bayes oracles, attribution, bounds and model selection."""

__version__ = "0.1.0"
