"""viplface: a small CNN runtime for deep face representation."""

__version__ = "0.1.0"
