"""Tensor-train semi-Lagrangian solver for mean field games."""

__version__ = "0.1.0"
