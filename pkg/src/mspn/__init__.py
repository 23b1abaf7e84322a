"""Sparsity-adaptive depth refinement with a masked spatial propagation network."""

__version__ = "0.1.0"
