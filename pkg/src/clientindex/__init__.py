"""Client distribution-shift indexing and index-enhanced federated learning simulation."""

__version__ = "0.1.0"
