"""Differentiable variational-inequality layers."""

__version__ = "0.1.0"
