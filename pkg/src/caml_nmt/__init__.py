"""Consistency-aware meta-learning for sequence-to-sequence translation."""

__version__ = "0.1.0"
