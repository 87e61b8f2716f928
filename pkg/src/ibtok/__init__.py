"""Information-regularized shared tokenization at toy scale."""

__version__ = "0.1.0"
