"""Desk-scale visual tracker built on compressed state tokens, selective-scan
temporal reasoning, and supervised state reconstruction."""

__version__ = "0.1.0"
