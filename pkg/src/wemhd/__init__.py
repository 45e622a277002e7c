"""Convex-integration toolkit for the relaxed electron-MHD system on the 3-torus.

Modules:

* ``spectral``: periodic fields, Fourier multipliers, inverse divergence, norms
* ``geometry``: direction set, geometric decomposition, amplitudes
* ``blocks``: Mikado tubes, intermittent jets, temporal oscillation blocks
* ``perturbation``: magnetic-potential and field perturbations
* ``stress``: initial triple, new stress, residual and inductive checks
* ``planner``: exact exponent systems and parameter thresholds
* ``cli``: command-line driver
"""

__version__ = "0.1.0"
