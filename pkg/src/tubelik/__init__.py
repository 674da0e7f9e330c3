"""Likelihood bounds for any-order and masked-diffusion sequence models on enumerable toy spaces."""

__version__ = "0.1.0"
