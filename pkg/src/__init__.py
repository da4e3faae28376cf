"""Distributed MIMO-OFDM dual-function radar-communication optimization."""

__version__ = "1.0.0"
