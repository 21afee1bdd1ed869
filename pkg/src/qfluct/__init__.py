"""Finite-size numerics for quantum central limit theorems on spin chains."""
__version__ = "0.1.0"
