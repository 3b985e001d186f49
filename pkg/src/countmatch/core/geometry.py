"""RLE codec, polygon rasterization, IoU and crop geometry."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import FormatError, ShapeError
from .types import BinaryMask, BoundingBox


def rle_encode(grid) -> BinaryMask:
    """Encode a row-major boolean grid of shape (height, width) as COCO RLE."""
    arr = np.asarray(grid, dtype=bool)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ShapeError(f"mask grid must be a non-empty 2-D array, got shape {arr.shape}")
    height, width = arr.shape
    flat = arr.ravel(order="F")
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return BinaryMask(width=width, height=height, runs=tuple(runs))


def rle_decode(mask: BinaryMask) -> np.ndarray:
    values = np.zeros(len(mask.runs), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, mask.runs)
    return flat.reshape((mask.height, mask.width), order="F")


def decode_compressed_counts(counts: str) -> list[int]:
    """Decode the LEB128-style string form of COCO RLE into run lengths."""
    runs: list[int] = []
    p = 0
    data = counts.encode("ascii") if isinstance(counts, str) else bytes(counts)
    while p < len(data):
        x = 0
        k = 0
        more = True
        while more:
            if p >= len(data):
                raise FormatError("truncated compressed RLE string")
            c = data[p] - 48
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(runs) > 2:
            x += runs[-2]
        runs.append(x)
    return runs


def rasterize_polygons(polygons: Sequence[Sequence[float]], width: int, height: int) -> np.ndarray:
    """Union of polygons sampled at pixel centres with the even-odd rule."""
    out = np.zeros((height, width), dtype=bool)
    ys = np.arange(height) + 0.5
    xs = np.arange(width) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    for poly in polygons:
        pts = np.asarray(poly, dtype=float).reshape(-1, 2)
        if len(pts) < 3:
            continue
        inside = np.zeros_like(out)
        x1, y1 = pts[:, 0], pts[:, 1]
        x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
        for ax, ay, bx, by in zip(x1, y1, x2, y2):
            if ay == by:
                continue
            crosses = (ay > gy) != (by > gy)
            x_at = ax + (gy - ay) * (bx - ax) / (by - ay)
            inside ^= crosses & (gx < x_at)
        out |= inside
    return out


def mask_from_coco(segmentation, width: int, height: int) -> BinaryMask:
    """Build a mask from a COCO ``segmentation`` field (RLE dict or polygon list)."""
    if isinstance(segmentation, dict):
        size = segmentation.get("size")
        counts = segmentation.get("counts")
        if size is None or counts is None:
            raise FormatError("RLE segmentation needs 'size' and 'counts'")
        h, w = int(size[0]), int(size[1])
        if (h, w) != (height, width):
            raise ShapeError(f"RLE size {h}x{w} does not match image {height}x{width}")
        runs = decode_compressed_counts(counts) if isinstance(counts, (str, bytes)) else counts
        return BinaryMask(width=w, height=h, runs=tuple(runs))
    if isinstance(segmentation, list):
        return rle_encode(rasterize_polygons(segmentation, width, height))
    raise FormatError(f"unsupported segmentation type {type(segmentation).__name__}")


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    if (a.width, a.height) != (b.width, b.height):
        raise ShapeError(
            f"mask sizes differ: {a.width}x{a.height} vs {b.width}x{b.height}"
        )
    pa, pb = a.pixels, b.pixels
    union = np.count_nonzero(pa | pb)
    if union == 0:
        return 0.0
    return np.count_nonzero(pa & pb) / union


def box_iou_matrix(a: Sequence[BoundingBox], b: Sequence[BoundingBox]) -> np.ndarray:
    if not a or not b:
        return np.zeros((len(a), len(b)))
    A = np.array([x.as_tuple() for x in a], dtype=float)
    B = np.array([x.as_tuple() for x in b], dtype=float)
    iw = np.minimum(A[:, None, 2], B[None, :, 2]) - np.maximum(A[:, None, 0], B[None, :, 0])
    ih = np.minimum(A[:, None, 3], B[None, :, 3]) - np.maximum(A[:, None, 1], B[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (A[:, 2] - A[:, 0]) * (A[:, 3] - A[:, 1])
    area_b = (B[:, 2] - B[:, 0]) * (B[:, 3] - B[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def mask_iou_matrix(a: Sequence[BinaryMask], b: Sequence[BinaryMask]) -> np.ndarray:
    if not a or not b:
        return np.zeros((len(a), len(b)))
    shapes = {(m.width, m.height) for m in list(a) + list(b)}
    if len(shapes) != 1:
        raise ShapeError(f"masks have mixed sizes: {sorted(shapes)}")
    A = np.stack([m.pixels.ravel() for m in a]).astype(np.float64)
    B = np.stack([m.pixels.ravel() for m in b]).astype(np.float64)
    inter = A @ B.T
    union = A.sum(axis=1)[:, None] + B.sum(axis=1)[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def crop_region(bbox: BoundingBox, scale: float, image_w: float, image_h: float) -> BoundingBox:
    """Scale ``bbox`` about its centre by ``scale`` and clamp it to the image."""
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    if scale == 1.0:
        return bbox.clamp(image_w, image_h)
    cx = (bbox.x_min + bbox.x_max) / 2.0
    cy = (bbox.y_min + bbox.y_max) / 2.0
    hw = bbox.width * scale / 2.0
    hh = bbox.height * scale / 2.0
    return BoundingBox(cx - hw, cy - hh, cx + hw, cy + hh).clamp(image_w, image_h)
