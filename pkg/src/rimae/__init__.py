"""Rotation-invariant masked point modeling with local reference frames."""

__version__ = "0.1.0"
