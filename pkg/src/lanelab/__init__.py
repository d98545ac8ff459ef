"""Lane-keeping lab: predictive state learning from offline driving data."""

__version__ = "0.1.0"
