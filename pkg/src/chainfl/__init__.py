"""Federated learning on a deterministic, replayable in-process ledger."""

__version__ = "0.1.0"
