"""Method-of-moments parameter learning for polynomial distribution families."""

__version__ = "0.1.0"
