"""Debiased pseudo-labeling for semi-supervised learning, with toy experiments."""

__version__ = "0.1.0"

from .debiaser import DebiaserConfig, DebiaserState, PseudoBatch  # noqa: E402,F401
