"""Proportional-share CPU market over simulated hosts, with a declarative deployment engine."""

__version__ = "0.1.0"
