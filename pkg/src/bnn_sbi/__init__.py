"""Low-budget simulation-based inference with Bayesian neural networks."""

__version__ = "0.1.0"
