"""Merge trees of scalar fields, exact labeled interleaving distances, and a
graph neural network trained to predict those distances."""

__version__ = "0.1.0"
