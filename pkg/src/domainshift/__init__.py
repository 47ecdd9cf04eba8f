"""Representation-shift diagnostics for CNN patch classifiers."""

__version__ = "0.1.0"
