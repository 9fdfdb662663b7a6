"""Finite-element solver for Boussinesq-coupled aqueous humor flow and heat transfer in the eye."""

__version__ = "0.1.0"
