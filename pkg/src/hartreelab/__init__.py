"""Numerical laboratory for the 4-D L2-critical Hartree NLS.

Radial discretization of R^4, Newton-theorem convolution kernels, ground
states by shooting and gradient flow, linearized operators with their
root-mode structure, deformed-kernel profile families, split-step time
evolution, and Bourgain-Wang style modulation tracking.
"""

from hartreelab.grid import RadialGrid, RadialField, make_grid

__all__ = [
    "RadialGrid",
    "RadialField",
    "make_grid",
]

__version__ = "0.1.0"
