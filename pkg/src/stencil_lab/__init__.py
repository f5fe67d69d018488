"""Stencil quality laboratory for RBF-FD meshless discretizations."""

__version__ = "0.1.0"
