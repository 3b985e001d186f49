"""Counting-constrained mask labelling and confidence-free evaluation."""
from .matcher import Assignment, MatchingProblem, Regime, brute_force_matching, solve_matching

__version__ = "0.1.0"

__all__ = ["Assignment", "MatchingProblem", "Regime", "brute_force_matching", "solve_matching"]
