"""One-shot domain adaptation of a small style-based face generator."""

__version__ = "0.1.0"
