"""mfglab: numerical lab for first-order mean field games with state constraints.

Modules: geometry (convex domains), model (Lagrangians, Hamiltonians,
couplings), trajopt (constrained optimal control), valuefn (value function
probes), equilibrium (fictitious play), pdecheck (PDE residuals on the
support) and cli (the ``mfglab`` runner).
"""

__version__ = "0.1.0"
