"""Multi-task sparse Bayesian recovery and dynamic tracking of beamspace channels."""

__version__ = "0.1.0"
