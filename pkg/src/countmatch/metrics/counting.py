"""Per-class counting precision / recall / F1 from image-level counts."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping

from ..errors import InputError


@dataclass(frozen=True)
class Tally:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "Tally") -> "Tally":
        return Tally(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def __iter__(self) -> Iterator[int]:
        return iter((self.tp, self.fp, self.fn))

    @property
    def precision(self) -> float:
        # no predictions: nothing was wrong
        return 1.0 if self.tp + self.fp == 0 else self.tp / (self.tp + self.fp)

    @property
    def recall(self) -> float:
        return 1.0 if self.tp + self.fn == 0 else self.tp / (self.tp + self.fn)

    @property
    def f1(self) -> float:
        # equals 2PR / (P + R) under the conventions above, with a single rounding
        denom = 2 * self.tp + self.fp + self.fn
        return 1.0 if denom == 0 else 2 * self.tp / denom


def merge_tallies(tallies: Iterable[Tally]) -> Tally:
    out = Tally()
    for t in tallies:
        out = out + t
    return out


@dataclass(frozen=True)
class ClassScores:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int

    @classmethod
    def from_tally(cls, t: Tally) -> "ClassScores":
        return cls(t.precision, t.recall, t.f1, t.tp, t.fp, t.fn)


def macro_mean(values: Iterable[float]) -> float:
    vals = list(values)
    if not vals:
        raise InputError("cannot average over an empty class set")
    return math.fsum(vals) / len(vals)


def counting_tally(gt_count: int, pred_count: int) -> Tally:
    if gt_count < 0 or pred_count < 0:
        raise InputError(f"counts must be non-negative, got gt={gt_count}, pred={pred_count}")
    t = Tally(
        tp=min(gt_count, pred_count),
        fp=max(0, pred_count - gt_count),
        fn=max(0, gt_count - pred_count),
    )
    assert t.tp + t.fn == gt_count and t.tp + t.fp == pred_count
    return t


@dataclass
class CountingResult:
    per_class: dict[str, ClassScores]
    mean_precision: float
    mean_recall: float
    mean_f1: float
    excluded: dict[str, int] = field(default_factory=dict)


def counting_prf(
    gt: Mapping[str, Mapping[str, int]],
    pred: Mapping[str, Mapping[str, int]],
    classes: Iterable[str],
) -> CountingResult:
    """Aggregate counting tallies over images per class, then macro-average.

    ``gt`` and ``pred`` map image id -> class -> count; absent entries are 0.
    Predicted classes outside ``classes`` are reported in ``excluded``.
    """
    classes = list(dict.fromkeys(classes))
    known = set(classes)
    totals = {c: Tally() for c in classes}
    excluded: dict[str, int] = {}
    for image in sorted(set(gt) | set(pred)):
        g = gt.get(image, {})
        p = pred.get(image, {})
        for c in classes:
            totals[c] = totals[c] + counting_tally(int(g.get(c, 0)), int(p.get(c, 0)))
        for c, v in p.items():
            if c not in known and v:
                excluded[c] = excluded.get(c, 0) + int(v)
    per_class = {c: ClassScores.from_tally(t) for c, t in totals.items()}
    return CountingResult(
        per_class=per_class,
        mean_precision=macro_mean(s.precision for s in per_class.values()),
        mean_recall=macro_mean(s.recall for s in per_class.values()),
        mean_f1=macro_mean(s.f1 for s in per_class.values()),
        excluded=dict(sorted(excluded.items())),
    )
