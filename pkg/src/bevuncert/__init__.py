"""Laplace vertex uncertainty, uncertainty fusion and gating on synthetic BEV scenes."""

__version__ = "0.1.0"
