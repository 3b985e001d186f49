"""Counting and confidence-free detection metrics."""
from .counting import ClassScores, CountingResult, Tally, counting_prf, counting_tally, merge_tallies
from .detection import (
    ApResult,
    DetectionResult,
    MatchResult,
    SweepResult,
    detection_mf1,
    greedy_match,
    map_nc,
    match_detections,
    sweep_grid,
    sweep_thresholds,
)
from .report import EvalReport, evaluate

__all__ = [
    "ApResult",
    "ClassScores",
    "CountingResult",
    "DetectionResult",
    "EvalReport",
    "MatchResult",
    "SweepResult",
    "Tally",
    "counting_prf",
    "counting_tally",
    "detection_mf1",
    "evaluate",
    "greedy_match",
    "map_nc",
    "match_detections",
    "merge_tallies",
    "sweep_grid",
    "sweep_thresholds",
]
