"""Toolkit for metering RTB ad prices and reporting anonymized ad metadata."""

__version__ = "0.1.0"
