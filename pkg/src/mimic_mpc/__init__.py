"""Differentiable-MPC imitation learning toolkit for lane keeping."""

__version__ = "0.1.0"
