"""Conditional slice generation for longitudinal abdominal CT harmonization."""

__version__ = "0.1.0"
