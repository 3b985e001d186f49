"""Dataset-level evaluation and report serialization."""
from __future__ import annotations

import csv
import io
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Sequence, Union

from ..core.coco import GroundTruth
from ..core.types import Detection, Setting
from ..similarity import (
    DEFAULT_EQUIVALENCE_THRESHOLD,
    DEFAULT_TEMPLATE,
    EmbeddingProvider,
    EquivalenceMap,
    match_generated_categories,
)
from .counting import ClassScores, CountingResult, counting_prf
from .detection import ApResult, DetectionResult, detection_mf1, map_nc

log = logging.getLogger(__name__)

AP_LABEL = "AP_nc (single-point)"


@dataclass
class EvalReport:
    setting: Setting
    iou_threshold: float
    classes: list[str]
    counting: Optional[CountingResult] = None
    box: Optional[DetectionResult] = None
    mask: Optional[DetectionResult] = None
    box_ap: Optional[ApResult] = None
    mask_ap: Optional[ApResult] = None
    diagnostics: dict[str, Any] = field(default_factory=dict)

    def summary(self) -> dict[str, Optional[float]]:
        return {
            "cnt_precision": self.counting.mean_precision if self.counting else None,
            "cnt_recall": self.counting.mean_recall if self.counting else None,
            "cnt_f1": self.counting.mean_f1 if self.counting else None,
            "box_precision": self.box.mean_precision if self.box else None,
            "box_recall": self.box.mean_recall if self.box else None,
            "box_f1": self.box.mean_f1 if self.box else None,
            "mask_precision": self.mask.mean_precision if self.mask else None,
            "mask_recall": self.mask.mean_recall if self.mask else None,
            "mask_f1": self.mask.mean_f1 if self.mask else None,
            "box_ap_nc": self.box_ap.mean if self.box_ap else None,
            "mask_ap_nc": self.mask_ap.mean if self.mask_ap else None,
        }

    def to_dict(self) -> dict[str, Any]:
        per_class = {}
        for c in self.classes:
            entry: dict[str, Any] = {}
            if self.counting:
                entry["counting"] = _scores(self.counting.per_class[c])
            if self.box:
                entry["box"] = _scores(self.box.per_class[c])
                entry["box"]["ap_nc"] = self.box_ap.per_class[c] if self.box_ap else None
            if self.mask:
                entry["mask"] = _scores(self.mask.per_class[c])
                entry["mask"]["ap_nc"] = self.mask_ap.per_class[c] if self.mask_ap else None
            per_class[c] = entry
        return {
            "setting": self.setting.value,
            "iou_threshold": self.iou_threshold,
            "ap_definition": AP_LABEL,
            "classes": list(self.classes),
            "summary": self.summary(),
            "per_class": per_class,
            "diagnostics": self.diagnostics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"

    def csv_rows(self) -> list[list[Any]]:
        header = [
            "class",
            "cnt_precision", "cnt_recall", "cnt_f1",
            "box_precision", "box_recall", "box_f1", "box_ap_nc",
            "mask_precision", "mask_recall", "mask_f1", "mask_ap_nc",
        ]
        rows = [header]

        def triple(res, c):
            if res is None:
                return ["", "", ""]
            s = res.per_class[c]
            return [s.precision, s.recall, s.f1]

        for c in self.classes:
            rows.append(
                [c]
                + triple(self.counting, c)
                + triple(self.box, c)
                + [self.box_ap.per_class[c] if self.box_ap else ""]
                + triple(self.mask, c)
                + [self.mask_ap.per_class[c] if self.mask_ap else ""]
            )
        s = self.summary()
        rows.append(
            ["mean"]
            + [_blank(s[k]) for k in ("cnt_precision", "cnt_recall", "cnt_f1")]
            + [_blank(s[k]) for k in ("box_precision", "box_recall", "box_f1", "box_ap_nc")]
            + [_blank(s[k]) for k in ("mask_precision", "mask_recall", "mask_f1", "mask_ap_nc")]
        )
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(self.csv_rows())
        return buf.getvalue()


def _blank(v):
    return "" if v is None else v


def _scores(s: ClassScores) -> dict[str, Any]:
    return {"precision": s.precision, "recall": s.recall, "f1": s.f1, "tp": s.tp, "fp": s.fp, "fn": s.fn}


def _exact_map(generated: Sequence[str], gt_names: Sequence[str], threshold: float) -> EquivalenceMap:
    lower = {}
    for name in gt_names:
        lower.setdefault(name.strip().lower(), name)
    eq = EquivalenceMap(threshold=threshold)
    for g in generated:
        hit = lower.get(g.strip().lower())
        eq.entries[g] = hit
        if hit is not None:
            eq.scores[g] = 1.0
    return eq


def gt_counts(gt: GroundTruth) -> dict[str, dict[str, int]]:
    out: dict[str, dict[str, int]] = {img: {} for img in gt.images}
    for d in gt.instances:
        per = out.setdefault(d.image_id, {})
        per[d.category] = per.get(d.category, 0) + 1
    return out


def detection_counts(dets: Sequence[Detection]) -> dict[str, dict[str, int]]:
    out: dict[str, dict[str, int]] = defaultdict(dict)
    for d in dets:
        out[d.image_id][d.category] = out[d.image_id].get(d.category, 0) + 1
    return dict(out)


def evaluate(
    detections: Sequence[Detection],
    gt: GroundTruth,
    setting: Union[str, Setting] = Setting.OPEN_VOCABULARY,
    classes: Optional[Sequence[str]] = None,
    pred_counts: Optional[Mapping[str, Mapping[str, int]]] = None,
    text_provider: Optional[EmbeddingProvider] = None,
    equivalence_threshold: float = DEFAULT_EQUIVALENCE_THRESHOLD,
    iou_thresh: float = 0.5,
    mask: Optional[bool] = None,
    template: str = DEFAULT_TEMPLATE,
) -> EvalReport:
    """Score detections (and optionally raw counts) against ground truth.

    In the open-ended and open-subclass settings predicted names are first
    mapped onto ground-truth names; unmapped predictions are dropped from the
    per-class metrics and tallied in ``diagnostics``. ``mask=None`` computes
    mask metrics only when every detection and annotation carries a mask.
    """
    setting = Setting.parse(setting)
    warnings: list[str] = []
    diagnostics: dict[str, Any] = {}
    gt_names = gt.category_names
    dets = list(detections)
    counts = {str(k): dict(v) for k, v in pred_counts.items()} if pred_counts is not None else None

    if setting is Setting.OPEN_VOCABULARY:
        class_set = list(classes) if classes else list(gt_names)
    else:
        generated = list(dict.fromkeys([d.category for d in dets] + [n for c in (counts or {}).values() for n in c]))
        if text_provider is None:
            eq = _exact_map(generated, gt_names, equivalence_threshold)
            if any(v is None for v in eq.entries.values()):
                warnings.append("no text embeddings supplied; only exact name matches were mapped")
        else:
            eq = match_generated_categories(generated, gt_names, text_provider, equivalence_threshold, template)
        mapped = []
        unmapped = 0
        for d in dets:
            target = eq.get(d.category)
            if target is None:
                unmapped += 1
            else:
                mapped.append(Detection(d.image_id, target, d.bbox, d.mask, d.score))
        dets = mapped
        if counts is not None:
            remapped: dict[str, dict[str, int]] = {}
            for img, per in counts.items():
                out = remapped.setdefault(img, {})
                for name, v in per.items():
                    target = eq.get(name)
                    if target is not None:
                        out[target] = out.get(target, 0) + int(v)
            counts = remapped
        diagnostics["unmapped_predictions"] = unmapped
        diagnostics["unmapped_names"] = sorted(eq.unmatched)
        diagnostics["equivalence"] = {
            k: {"ground_truth": eq.entries[k], "similarity": eq.scores.get(k)} for k in sorted(eq.entries)
        }
        present = {d.category for d in gt.instances}
        base = list(classes) if classes else [n for n in gt_names if n in present]
        extra = {d.category for d in dets} - set(base)
        class_set = base + [n for n in gt_names if n in extra]

    class_set = list(dict.fromkeys(class_set))
    outside_gt = sum(1 for d in gt.instances if d.category not in set(class_set))
    if outside_gt:
        diagnostics["gt_outside_classes"] = outside_gt

    pc = counts if counts is not None else detection_counts(dets)
    counting = counting_prf(gt_counts(gt), pc, class_set)
    box = detection_mf1(dets, gt.instances, class_set, "box", iou_thresh)
    box_ap = map_nc(dets, gt.instances, class_set, "box", iou_thresh)

    mask_res = mask_ap = None
    have_masks = all(d.mask is not None for d in dets) and gt.has_masks()
    if mask is not False:
        if have_masks:
            mask_res = detection_mf1(dets, gt.instances, class_set, "mask", iou_thresh)
            mask_ap = map_nc(dets, gt.instances, class_set, "mask", iou_thresh)
        elif mask:
            warnings.append("mask metrics requested but detections or ground truth lack masks")
            log.warning(warnings[-1])

    if counting.excluded:
        diagnostics["excluded_count_classes"] = counting.excluded
    if box.excluded:
        diagnostics["excluded_prediction_classes"] = box.excluded
    diagnostics["warnings"] = warnings
    return EvalReport(
        setting=setting,
        iou_threshold=iou_thresh,
        classes=class_set,
        counting=counting,
        box=box,
        mask=mask_res,
        box_ap=box_ap,
        mask_ap=mask_ap,
        diagnostics=diagnostics,
    )
