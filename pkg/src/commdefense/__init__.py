"""Robust multi-agent communication: decomposable aggregation, reliability
weighting, and a message-perturbation attack suite."""

__version__ = "0.1.0"
