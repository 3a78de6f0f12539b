"""Score-based change detection for parameters of probabilistic-loss programs."""

__version__ = "0.1.0"
