"""Invariant metrics, boundary scaling and Fridman-invariant experiments on domains in C^n."""

__version__ = "0.1.0"
