"""Few-shot recognition with a multi-level (image, global, object) similarity model."""

__version__ = "0.1.0"
