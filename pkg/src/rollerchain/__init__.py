"""Rollerchain: proof-of-work over rolling state snapshots."""

__version__ = "0.1.0"
