"""Clustered federated learning over P2P networks: keys, masked aggregation and a network simulator."""

__version__ = "0.1.0"

from .errors import CFLError  # noqa: F401
