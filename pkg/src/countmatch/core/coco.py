"""COCO-style JSON ingestion and emission for ground truth, proposals and detections."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

from ..errors import FormatError, InputError
from .geometry import mask_from_coco
from .types import BoundingBox, Detection, MaskProposal


@dataclass(frozen=True)
class ImageInfo:
    id: str
    width: int
    height: int
    file_name: str = ""


@dataclass
class GroundTruth:
    images: dict[str, ImageInfo] = field(default_factory=dict)
    categories: dict[int, str] = field(default_factory=dict)
    instances: list[Detection] = field(default_factory=list)

    @property
    def category_names(self) -> list[str]:
        return [self.categories[k] for k in sorted(self.categories)]

    @property
    def category_ids(self) -> dict[str, int]:
        return {name: cid for cid, name in self.categories.items()}

    def has_masks(self) -> bool:
        return all(d.mask is not None for d in self.instances)


def read_json(path: str | Path) -> Any:
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise InputError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None


def write_json(path: str | Path, payload: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(payload, indent=2, ensure_ascii=False) + "\n"
    path.write_text(text, encoding="utf-8")


def _segmentation(ann: Mapping, info: Optional[ImageInfo], where: str):
    seg = ann.get("segmentation")
    if seg in (None, [], {}):
        return None
    if info is None:
        if isinstance(seg, dict) and "size" in seg:
            h, w = seg["size"]
            return mask_from_coco(seg, int(w), int(h))
        raise FormatError(f"{where}: polygon segmentation needs image width/height")
    return mask_from_coco(seg, info.width, info.height)


def parse_ground_truth(data: Mapping, where: str = "<ground truth>") -> GroundTruth:
    if not isinstance(data, Mapping) or "annotations" not in data:
        raise FormatError(f"{where}: expected a COCO object with 'annotations'")
    gt = GroundTruth()
    for img in data.get("images", []):
        info = ImageInfo(
            id=str(img["id"]),
            width=int(img.get("width", 0)),
            height=int(img.get("height", 0)),
            file_name=str(img.get("file_name", "")),
        )
        gt.images[info.id] = info
    for cat in data.get("categories", []):
        gt.categories[int(cat["id"])] = str(cat["name"])
    for ann in data["annotations"]:
        image_id = str(ann["image_id"])
        try:
            name = gt.categories[int(ann["category_id"])]
        except KeyError:
            raise FormatError(f"{where}: annotation {ann.get('id')} has unknown category_id") from None
        info = gt.images.get(image_id)
        mask = _segmentation(ann, info, where)
        if "bbox" in ann:
            bbox = BoundingBox.from_xywh(ann["bbox"])
        elif mask is not None:
            bbox = mask.tight_bbox()
        else:
            raise FormatError(f"{where}: annotation {ann.get('id')} has neither bbox nor segmentation")
        gt.instances.append(Detection(image_id=image_id, category=name, bbox=bbox, mask=mask))
    return gt


def load_ground_truth(path: str | Path) -> GroundTruth:
    return parse_ground_truth(read_json(path), where=str(path))


def parse_detections(
    data: Any,
    categories: Optional[Mapping[int, str]] = None,
    images: Optional[Mapping[str, ImageInfo]] = None,
    where: str = "<detections>",
) -> list[Detection]:
    """Read a COCO results list (or an object with ``annotations``).

    The category is taken from ``category_name`` when present, otherwise
    ``category_id`` is resolved through ``categories``.
    """
    if isinstance(data, Mapping):
        data = data.get("annotations", [])
    if not isinstance(data, list):
        raise FormatError(f"{where}: expected a list of detections")
    out = []
    for k, item in enumerate(data):
        if "category_name" in item:
            name = str(item["category_name"])
        elif categories is not None and int(item.get("category_id", -1)) in categories:
            name = categories[int(item["category_id"])]
        else:
            raise FormatError(f"{where}: detection {k} has no resolvable category")
        image_id = str(item["image_id"])
        info = images.get(image_id) if images else None
        mask = _segmentation(item, info, where)
        if "bbox" in item:
            bbox = BoundingBox.from_xywh(item["bbox"])
        elif mask is not None:
            bbox = mask.tight_bbox()
        else:
            raise FormatError(f"{where}: detection {k} has neither bbox nor segmentation")
        score = item.get("score")
        out.append(
            Detection(
                image_id=image_id,
                category=name,
                bbox=bbox,
                mask=mask,
                score=None if score is None else float(score),
            )
        )
    return out


def load_detections(path: str | Path, gt: Optional[GroundTruth] = None) -> list[Detection]:
    return parse_detections(
        read_json(path),
        categories=gt.categories if gt else None,
        images=gt.images if gt else None,
        where=str(path),
    )


def detection_to_coco(det: Detection, category_ids: Optional[Mapping[str, int]] = None) -> dict:
    item: dict[str, Any] = {"image_id": det.image_id, "category_name": det.category}
    if category_ids and det.category in category_ids:
        item["category_id"] = category_ids[det.category]
    item["bbox"] = det.bbox.to_xywh()
    if det.mask is not None:
        item["segmentation"] = det.mask.to_coco()
    if det.score is not None:
        item["score"] = det.score
    return item


def detections_to_coco(
    dets: Iterable[Detection], category_ids: Optional[Mapping[str, int]] = None
) -> list[dict]:
    return [detection_to_coco(d, category_ids) for d in dets]


def parse_proposals(data: Any, image: ImageInfo, where: str = "<proposals>") -> list[MaskProposal]:
    """Read class-agnostic proposals for one image.

    Accepts a list of annotation objects or a COCO object with
    ``annotations``; each entry needs ``id`` and an RLE or polygon
    ``segmentation``. A supplied ``bbox`` must equal the mask's tight box.
    """
    if isinstance(data, Mapping):
        data = data.get("annotations", [])
    if not isinstance(data, list):
        raise FormatError(f"{where}: expected a list of proposals")
    out = []
    seen: set[int] = set()
    for k, item in enumerate(data):
        pid = int(item.get("id", k))
        if pid in seen:
            raise FormatError(f"{where}: duplicate proposal id {pid}")
        seen.add(pid)
        if "segmentation" not in item:
            raise FormatError(f"{where}: proposal {pid} has no segmentation")
        mask = mask_from_coco(item["segmentation"], image.width, image.height)
        try:
            if "bbox" in item:
                out.append(MaskProposal(pid, image.id, mask, BoundingBox.from_xywh(item["bbox"])))
            else:
                out.append(MaskProposal.from_mask(pid, image.id, mask))
        except InputError as exc:
            raise FormatError(f"{where}: {exc}") from None
    return out


def load_proposals(path: str | Path, image: ImageInfo) -> list[MaskProposal]:
    return parse_proposals(read_json(path), image, where=str(path))


def proposals_to_coco(proposals: Sequence[MaskProposal]) -> list[dict]:
    return [
        {"id": p.id, "image_id": p.image_id, "bbox": p.bbox.to_xywh(), "segmentation": p.mask.to_coco()}
        for p in proposals
    ]
