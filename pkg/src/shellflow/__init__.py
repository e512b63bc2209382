"""Numerical laboratory for stochastic GOY/Sabra shell models and the
stability criterion for Markov semigroups with the e-property."""

__version__ = "0.1.0"
