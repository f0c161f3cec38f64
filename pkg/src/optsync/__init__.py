"""Deterministic simulator and protocol library for nanosecond-scale clock
synchronization over circuit-switched optical fabrics."""

__version__ = "0.1.0"
