"""Lorentz gas dynamics at small scatterer radius and its kinetic limit.

The package follows the pipeline of the underlying theory: scatterer
configurations (pointsets), single-scatterer maps (scattering), billiard
trajectories (dynamics), empirical transition kernels (kernels), the limiting
flight process (limitprocess), and the associated transport equation
(transport). The cli module exposes the whole chain as experiments.
"""

__version__ = "0.1.0"
