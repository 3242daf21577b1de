"""Anchor-free single-stage 3D point-cloud detector on CPU."""

__version__ = "0.1.0"
