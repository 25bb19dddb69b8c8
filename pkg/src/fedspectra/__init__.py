"""Federated learning simulation engine with frequency-domain aggregation
and three-phase personalized knowledge transfer."""

__version__ = "0.1.0"
