"""Desk-scale lab for nonequilibrium pattern formation.

Simulates four prototype systems with pseudo-spectral solvers, trains
hierarchical Fourier-attention surrogates on sparse noisy observations with
a self-contained reverse-mode engine, and recovers closed-form constitutive
terms via concentration binning plus risk-seeking symbolic regression.
"""

__version__ = "0.1.0"
