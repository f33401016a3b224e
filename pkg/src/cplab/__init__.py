"""cplab: a numerical laboratory for critical contact processes.

Event-driven simulation of birth-and-death particle dynamics on general
discrete spaces and the continuum torus, cross-validated against the
moment-equation hierarchy for correlation functions, plus estimators for
transience of the associated two-walker process.
"""

__version__ = "0.1.0"

from .spaces import (  # noqa: F401
    ContinuumKernel,
    Environment,
    KernelSpace,
    build_conductance_kernel,
    build_continuum_kernel,
    build_lattice_kernel,
    build_percolation_kernel,
    build_ring_kernel,
    build_tree_kernel,
    scale_kernel,
    verify_criticality,
)
