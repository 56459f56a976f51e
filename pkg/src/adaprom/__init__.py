"""Adaptive sampling of matrix-interpolatory parametric reduced-order models for structural optimization."""
__version__ = "0.1.0"
