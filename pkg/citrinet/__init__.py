"""
citrinet package initialization.

Citrinet and attention-enhanced Citrinet speech recognizers built from scratch on
a float64 reverse-mode autodiff core, with a CLI for synthetic data, training,
decoding, gradient checks and parameter census.
"""

__version__ = "0.3.0"
