"""One-shot federated learning with mixtures of Laplace approximations."""

__version__ = "0.1.0"
