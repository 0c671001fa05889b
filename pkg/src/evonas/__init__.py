"""Continuous-evolution architecture search over a weight-sharing SuperNet, in numpy."""

__version__ = "0.1.0"
