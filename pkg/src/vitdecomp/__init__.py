"""Component-level decomposition and interpretation of toy vision transformers."""

__version__ = "0.1.0"
