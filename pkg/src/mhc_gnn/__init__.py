"""Manifold-constrained hyper-connections for graph neural networks.

A small numpy engine: tape-based reverse-mode autodiff, Sinkhorn projection
onto doubly stochastic matrices, multi-stream GNN layers, training loop and
the analysis harnesses used to probe over-smoothing and expressiveness.
"""

__version__ = "0.1.0"
