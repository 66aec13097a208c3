"""Healthy-to-stroke transfer learning toolkit for sEMG intent detection."""

__version__ = "0.1.0"
