"""Frequency-decoupled state-space MRI reconstruction."""

__version__ = "0.1.0"
