"""Domain-disentangling two-stage detector on a synthetic two-domain benchmark."""

__version__ = "0.1.0"
