"""Numerical laboratory for Jacobi forms, Saito-Kurokawa lifts and central L-value moments."""
__version__ = "0.1.0"
