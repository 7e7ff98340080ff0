"""Partition-isolated GNN training with coverage-corrected gradient aggregation."""

__version__ = "0.1.0"
