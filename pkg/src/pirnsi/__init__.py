"""Private information retrieval with private noisy side information."""

__version__ = "0.1.0"
