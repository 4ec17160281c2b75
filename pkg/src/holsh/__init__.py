"""Hoelder shadowing experiments: maps, pseudotrajectories, cocycles and dichotomies."""

__version__ = "0.1.0"
