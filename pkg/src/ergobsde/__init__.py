"""Ergodic BSDEs for Galerkin-truncated stochastic evolution equations.

Modules
-------
model        coefficients, assumption checks, SPDE builders
forward      path simulation and stability estimates
hamiltonian  concave drivers, conjugates, control Hamiltonians
bsde         least-squares Monte Carlo BSDE solver
ergodic      vanishing discount and ergodic identities
control      ergodic costs and feedback synthesis
cli          scenario runner
"""

__version__ = "0.1.0"
