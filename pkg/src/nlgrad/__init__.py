"""Truncated nonlocal gradient calculus and polyconvex energy minimisation."""

__version__ = "0.1.0"
