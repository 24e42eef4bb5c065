"""Report generation from synthetic head scans: pyramid CNN encoder + Transformer decoder."""

__version__ = "0.1.0"
