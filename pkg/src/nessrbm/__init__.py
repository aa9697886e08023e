"""Variational Monte-Carlo steady states of boundary-driven XXZ chains.

The package approximates the non-equilibrium steady state of a
dissipative spin chain with a purified two-network RBM density operator,
optimized by backtracked Nesterov descent with belief preconditioning,
and ships an exact-diagonalization oracle for small chains.
"""

__version__ = "0.1.0"
