"""
chaosflow - chaos expansions for Brownian motion stopped at a barrier.

This package computes barrier-survival probabilities, samples Brownian motion
conditioned to stay below a barrier, evaluates compensated multiple integrals
and the stopped-flow and Krylov-Veretennikov expansions, and checks the
identities between them with seeded Monte Carlo experiments.
"""

__version__ = "0.1.0"
