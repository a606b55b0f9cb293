"""Variational SMC for stochastic low-rank RNNs, with exact fixed-point
enumeration of the learned piecewise-linear dynamics."""

__version__ = "0.1.0"
