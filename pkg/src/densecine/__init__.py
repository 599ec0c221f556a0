"""Joint strain / late-activation learning on a synthetic cardiac phantom."""

__version__ = "0.1.0"
