"""Distributed GP field learning and informative multi-agent path planning."""

__version__ = "0.1.0"
