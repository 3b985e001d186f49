"""Domain types, mask/box geometry and COCO-style I/O."""
from .geometry import (
    box_iou,
    box_iou_matrix,
    crop_region,
    decode_compressed_counts,
    mask_from_coco,
    mask_iou,
    mask_iou_matrix,
    rasterize_polygons,
    rle_decode,
    rle_encode,
)
from .types import BinaryMask, BoundingBox, CountPrediction, Detection, MaskProposal, Setting

__all__ = [
    "BinaryMask",
    "BoundingBox",
    "CountPrediction",
    "Detection",
    "MaskProposal",
    "Setting",
    "box_iou",
    "box_iou_matrix",
    "crop_region",
    "decode_compressed_counts",
    "mask_from_coco",
    "mask_iou",
    "mask_iou_matrix",
    "rasterize_polygons",
    "rle_decode",
    "rle_encode",
]
