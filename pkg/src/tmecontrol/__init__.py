"""Ensemble ABM simulation, Markov state modelling and finite-horizon
treatment scheduling for tumor microenvironment dynamics."""

__version__ = "0.1.0"
