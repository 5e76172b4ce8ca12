"""Numerical-defect detection, confirmation and repair for tensor computation graphs."""

__version__ = "0.1.0"
