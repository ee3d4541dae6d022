"""Desk-scale simulator of a federated, decentralized adaptive transmission protocol."""

__version__ = "0.1.0"
