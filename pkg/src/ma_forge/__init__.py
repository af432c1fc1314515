"""Numerical laboratory for singular solutions of det D^2 u = 1.

Obstacle problems with polytope obstacles are solved with a monotone
wide-stencil scheme; discrete Legendre transforms of the solutions give
convex functions whose Monge-Ampere measure carries Dirac masses.
"""

__version__ = "0.1.0"
