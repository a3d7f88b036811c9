"""Multi-scale speech style modeling at desk scale."""

__version__ = "0.1.0"
