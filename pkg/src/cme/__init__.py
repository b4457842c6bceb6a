"""Prototype-based few-shot detector with class-margin balancing on a numpy autodiff engine."""

__version__ = "0.1.0"
