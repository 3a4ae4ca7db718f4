"""Online vectorized map construction that feeds previous predictions back as queries."""

__version__ = "0.1.0"
