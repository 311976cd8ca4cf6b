"""Max-min discriminant-gain design for over-the-air feature aggregation."""

__version__ = "0.1.0"
