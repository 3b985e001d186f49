"""Confidence-free detection metrics: mF1, single-point AP_nc and the score sweep."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from ..core.geometry import box_iou_matrix, mask_iou_matrix
from ..core.types import Detection
from ..errors import InputError
from .counting import ClassScores, Tally, macro_mean

IouFn = Callable[[Sequence[Detection], Sequence[Detection]], np.ndarray]


def box_ious(preds: Sequence[Detection], gts: Sequence[Detection]) -> np.ndarray:
    return box_iou_matrix([p.bbox for p in preds], [g.bbox for g in gts])


def mask_ious(preds: Sequence[Detection], gts: Sequence[Detection]) -> np.ndarray:
    if any(d.mask is None for d in list(preds) + list(gts)):
        raise InputError("mask IoU requested for detections without masks")
    return mask_iou_matrix([p.mask for p in preds], [g.mask for g in gts])


def resolve_iou(iou_fn: Union[str, IouFn]) -> IouFn:
    if callable(iou_fn):
        return iou_fn
    if iou_fn == "box":
        return box_ious
    if iou_fn == "mask":
        return mask_ious
    raise ValueError(f"unknown IoU kind {iou_fn!r}")


@dataclass(frozen=True)
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: tuple[tuple[int, int], ...]

    @property
    def tally(self) -> Tally:
        return Tally(self.tp, self.fp, self.fn)


def _candidates(iou: np.ndarray, thresh: float) -> list[tuple[int, int]]:
    p_idx, g_idx = np.nonzero(iou >= thresh)
    vals = iou[p_idx, g_idx]
    order = np.lexsort((g_idx, p_idx, -vals))
    return [(int(p_idx[k]), int(g_idx[k])) for k in order]


def _greedy(cands: Iterable[tuple[int, int]], keep: Optional[np.ndarray] = None) -> list[tuple[int, int]]:
    used_p: set[int] = set()
    used_g: set[int] = set()
    pairs = []
    for p, g in cands:
        if keep is not None and not keep[p]:
            continue
        if p in used_p or g in used_g:
            continue
        used_p.add(p)
        used_g.add(g)
        pairs.append((p, g))
    return pairs


def greedy_match(iou: np.ndarray, thresh: float) -> list[tuple[int, int]]:
    """Pair predictions and ground truth by descending IoU, each used at most once.

    Ties are broken by prediction index, then ground-truth index.
    """
    return _greedy(_candidates(np.asarray(iou, dtype=float), thresh))


def match_detections(
    preds: Sequence[Detection],
    gts: Sequence[Detection],
    iou_fn: Union[str, IouFn] = "box",
    iou_thresh: float = 0.5,
) -> MatchResult:
    if not preds or not gts:
        return MatchResult(0, len(preds), len(gts), ())
    iou = resolve_iou(iou_fn)(preds, gts)
    pairs = greedy_match(iou, iou_thresh)
    return MatchResult(len(pairs), len(preds) - len(pairs), len(gts) - len(pairs), tuple(pairs))


def _group(dets: Iterable[Detection]) -> dict[tuple[str, str], list[Detection]]:
    out: dict[tuple[str, str], list[Detection]] = defaultdict(list)
    for d in dets:
        out[(d.category, d.image_id)].append(d)
    return out


@dataclass
class DetectionResult:
    per_class: dict[str, ClassScores]
    mean_precision: float
    mean_recall: float
    mean_f1: float
    iou_threshold: float
    excluded: dict[str, int] = field(default_factory=dict)


def detection_tallies(
    preds: Sequence[Detection],
    gts: Sequence[Detection],
    classes: Iterable[str],
    iou_fn: Union[str, IouFn] = "box",
    iou_thresh: float = 0.5,
) -> tuple[dict[str, Tally], dict[str, int]]:
    classes = list(dict.fromkeys(classes))
    known = set(classes)
    fn = resolve_iou(iou_fn)
    pred_groups = _group(preds)
    gt_groups = _group(gts)
    totals = {c: Tally() for c in classes}
    excluded: dict[str, int] = {}
    for (cat, _), group in pred_groups.items():
        if cat not in known:
            excluded[cat] = excluded.get(cat, 0) + len(group)
    for key in sorted(set(pred_groups) | set(gt_groups)):
        cat = key[0]
        if cat not in known:
            continue
        totals[cat] = totals[cat] + match_detections(
            pred_groups.get(key, []), gt_groups.get(key, []), fn, iou_thresh
        ).tally
    return totals, dict(sorted(excluded.items()))


def _result(totals: dict[str, Tally], iou_thresh: float, excluded: dict[str, int]) -> DetectionResult:
    per_class = {c: ClassScores.from_tally(t) for c, t in totals.items()}
    return DetectionResult(
        per_class=per_class,
        mean_precision=macro_mean(s.precision for s in per_class.values()),
        mean_recall=macro_mean(s.recall for s in per_class.values()),
        mean_f1=macro_mean(s.f1 for s in per_class.values()),
        iou_threshold=iou_thresh,
        excluded=excluded,
    )


def detection_mf1(
    preds: Sequence[Detection],
    gts: Sequence[Detection],
    classes: Iterable[str],
    iou_fn: Union[str, IouFn] = "box",
    iou_thresh: float = 0.5,
) -> DetectionResult:
    totals, excluded = detection_tallies(preds, gts, classes, iou_fn, iou_thresh)
    return _result(totals, iou_thresh, excluded)


@dataclass
class ApResult:
    per_class: dict[str, float]
    mean: float
    iou_threshold: float
    label: str = "AP_nc (single-point)"


def ap_from_tally(t: Tally) -> float:
    """Area under the rectangular curve through the single (P, R) point."""
    return t.precision * t.recall


def map_nc(
    preds: Sequence[Detection],
    gts: Sequence[Detection],
    classes: Iterable[str],
    iou_fn: Union[str, IouFn] = "box",
    iou_thresh: float = 0.5,
) -> ApResult:
    """AP with every prediction at the same confidence. Scores are ignored."""
    totals, _ = detection_tallies(preds, gts, classes, iou_fn, iou_thresh)
    per_class = {c: ap_from_tally(t) for c, t in totals.items()}
    return ApResult(per_class=per_class, mean=macro_mean(per_class.values()), iou_threshold=iou_thresh)


def sweep_grid(step: float) -> list[float]:
    if not 0 < step <= 1:
        raise InputError(f"sweep step must lie in (0, 1], got {step}")
    n = int(np.floor(1.0 / step + 1e-9))
    return [round(k * step, 10) for k in range(n + 1)]


@dataclass
class SweepResult:
    best_threshold: float
    best_mf1: float
    curve: list[tuple[float, float]]
    survivors: list[int] = field(default_factory=list)


def sweep_thresholds(
    scored_preds: Sequence[Detection],
    gts: Sequence[Detection],
    classes: Iterable[str],
    step: float = 0.02,
    iou_fn: Union[str, IouFn] = "box",
    iou_thresh: float = 0.5,
) -> SweepResult:
    """Evaluate mF1 keeping predictions with score >= t for t = 0, step, ..., 1.

    The best threshold is the smallest one reaching the maximum mF1.
    """
    for k, d in enumerate(scored_preds):
        if d.score is None:
            raise InputError(f"prediction {k} has no score; use confidence-free evaluation instead")
    classes = list(dict.fromkeys(classes))
    known = set(classes)
    fn = resolve_iou(iou_fn)
    pred_groups = _group(p for p in scored_preds if p.category in known)
    gt_groups = _group(g for g in gts if g.category in known)
    prepared = []
    for key in sorted(set(pred_groups) | set(gt_groups)):
        ps = pred_groups.get(key, [])
        gs = gt_groups.get(key, [])
        scores = np.array([p.score for p in ps], dtype=float)
        cands = _candidates(fn(ps, gs), iou_thresh) if ps and gs else []
        prepared.append((key[0], scores, cands, len(gs)))

    curve = []
    survivors = []
    for t in sweep_grid(step):
        totals = {c: Tally() for c in classes}
        alive = 0
        for cat, scores, cands, n_gt in prepared:
            keep = scores >= t
            n_keep = int(keep.sum())
            alive += n_keep
            tp = len(_greedy(cands, keep)) if n_keep and n_gt else 0
            totals[cat] = totals[cat] + Tally(tp, n_keep - tp, n_gt - tp)
        curve.append((t, macro_mean(x.f1 for x in totals.values())))
        survivors.append(alive)
    best_t, best = curve[0]
    for t, v in curve:
        if v > best:
            best_t, best = t, v
    return SweepResult(best_threshold=best_t, best_mf1=best, curve=curve, survivors=survivors)
