"""Sponsored KV-cache retention: scoring, anchor detection, policies, simulation and bounds."""

__version__ = "0.1.0"
