"""Numerical laboratory for the Nelson model of a hydrogen-like atom.

Modules
-------
modes      form factor, coupling constants and discrete mode grids
fock       truncated bosonic Fock space and sparse operators
wick       operator strings, Wick contractions and vacuum expectation values
quad       adaptive 1D, tensor Gauss and Monte Carlo integration
spectral   Lanczos ground states, trial states and energy expansions
lemmas     numerical checks of quadratic-form bounds
cli        the ``nelsonlab`` command
"""

__version__ = "0.1.0"
