"""Trustworthy distributed training over a hash-chained ledger, simulated on one host."""

__version__ = "0.1.0"
