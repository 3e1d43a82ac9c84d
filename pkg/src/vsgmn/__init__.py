"""Zero-shot learning by matching visual and semantic class-relation graphs."""

__version__ = "0.1.0"
