"""Offline design and validation of decentralized Volt-VAr control slopes."""

__version__ = "0.1.0"
