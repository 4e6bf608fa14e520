"""Certified controller adaptation: per-controller robust invariant sets for
polynomial systems (including neural-network controlled ones) plus an
energy-aware switching policy constrained to the joint safe space."""

__version__ = "0.1.0"
