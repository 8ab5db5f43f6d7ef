"""Gaussian-process emulation of PDE forward maps for Bayesian inversion.

Submodules
----------
kernels    stationary covariance functions with closed-form derivatives
pde        reference solvers, observation operators, operator-applied kernels
design     Halton designs and training-set generation
emulator   GP surrogate families conditioned on solver output
posterior  approximate and exact posterior densities with gradients
mcmc       Metropolis-adjusted Langevin sampling and chain diagnostics
metrics    grid densities, Hellinger distance, error summaries
cli        config-driven experiment runner
"""

__version__ = "0.1.0"
