"""Stochastic hard-attention classifier with importance-sampled wake-sleep
gradient estimators, exact-enumeration oracles, and a batched training
engine. See README.md for the command-line interface."""

__version__ = "0.1.0"
