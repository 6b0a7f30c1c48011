"""Few-shot one-class text classification by sequence match."""

__version__ = "0.1.0"
