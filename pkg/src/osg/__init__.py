"""Optimization-based scenario generation at tunable risk levels."""

__version__ = "0.1.0"
