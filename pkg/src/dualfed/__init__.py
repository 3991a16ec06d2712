"""Federated fine-tuning of a frozen transformer with shared and private low-rank adapters."""

__version__ = "0.1.0"
