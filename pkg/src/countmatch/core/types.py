"""Immutable domain types shared by every stage."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np

from ..errors import InputError, ShapeError


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in continuous pixel coordinates, origin top-left."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise InputError(f"non-finite box coordinates: {coords}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise InputError(f"inverted box: {coords}")

    @classmethod
    def from_xywh(cls, xywh: Sequence[float]) -> "BoundingBox":
        x, y, w, h = (float(v) for v in xywh)
        return cls(x, y, x + w, y + h)

    def to_xywh(self) -> list[float]:
        return [self.x_min, self.y_min, self.width, self.height]

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def clamp(self, width: float, height: float) -> "BoundingBox":
        return BoundingBox(
            min(max(self.x_min, 0.0), width),
            min(max(self.y_min, 0.0), height),
            min(max(self.x_max, 0.0), width),
            min(max(self.y_max, 0.0), height),
        )


@dataclass(frozen=True)
class BinaryMask:
    """Binary mask stored as uncompressed COCO RLE.

    ``runs`` alternate background/foreground lengths over the pixels in
    column-major order, starting with background (possibly a zero run).
    """

    width: int
    height: int
    runs: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ShapeError(f"mask dimensions must be positive, got {self.width}x{self.height}")
        runs = tuple(int(r) for r in self.runs)
        if any(r < 0 for r in runs):
            raise InputError("negative run length in RLE")
        if sum(runs) != self.width * self.height:
            raise InputError(
                f"RLE runs sum to {sum(runs)}, expected {self.width * self.height}"
            )
        object.__setattr__(self, "runs", runs)

    @cached_property
    def pixels(self) -> np.ndarray:
        """Decoded boolean array of shape (height, width)."""
        from .geometry import rle_decode

        arr = rle_decode(self)
        arr.setflags(write=False)
        return arr

    @cached_property
    def area(self) -> int:
        return sum(self.runs[1::2])

    def tight_bbox(self) -> Optional[BoundingBox]:
        """Tight half-open box around the foreground, or None if empty."""
        if self.area == 0:
            return None
        px = self.pixels
        rows = np.flatnonzero(px.any(axis=1))
        cols = np.flatnonzero(px.any(axis=0))
        return BoundingBox(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))

    def to_coco(self) -> dict:
        return {"size": [self.height, self.width], "counts": list(self.runs)}


@dataclass(frozen=True)
class MaskProposal:
    """One class-agnostic region proposed for an image."""

    id: int
    image_id: str
    mask: BinaryMask
    bbox: BoundingBox

    def __post_init__(self) -> None:
        tight = self.mask.tight_bbox()
        if tight is None:
            raise InputError(f"proposal {self.id} of image {self.image_id} has an empty mask")
        if tight != self.bbox:
            raise InputError(
                f"proposal {self.id} of image {self.image_id}: bbox {self.bbox.as_tuple()} "
                f"does not match mask extent {tight.as_tuple()}"
            )

    @classmethod
    def from_mask(cls, id: int, image_id: str, mask: BinaryMask) -> "MaskProposal":
        tight = mask.tight_bbox()
        if tight is None:
            raise InputError(f"proposal {id} of image {image_id} has an empty mask")
        return cls(id, image_id, mask, tight)

    @property
    def embedding_key(self) -> str:
        return f"{self.image_id}#{self.id}"


@dataclass(frozen=True)
class CountPrediction:
    """Category -> count map for one image, in the order the counter emitted it."""

    image_id: str
    counts: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        cleaned: dict[str, int] = {}
        seen: set[str] = set()
        for name, value in self.counts.items():
            key = str(name).strip()
            if not key:
                raise InputError(f"empty category name in counts for image {self.image_id}")
            if key.lower() in seen:
                raise InputError(f"duplicate category {key!r} in counts for image {self.image_id}")
            if isinstance(value, bool) or int(value) != value or value < 0:
                raise InputError(f"count for {key!r} must be a non-negative integer, got {value!r}")
            seen.add(key.lower())
            cleaned[key] = int(value)
        object.__setattr__(self, "counts", cleaned)

    def positive(self) -> dict[str, int]:
        return {k: v for k, v in self.counts.items() if v > 0}

    def __iter__(self) -> Iterator[tuple[str, int]]:
        return iter(self.counts.items())


@dataclass(frozen=True)
class Detection:
    """A recognized object. Confidence-free producers leave ``score`` as None."""

    image_id: str
    category: str
    bbox: BoundingBox
    mask: Optional[BinaryMask] = None
    score: Optional[float] = None

    def __post_init__(self) -> None:
        if self.score is not None and not (0.0 <= self.score <= 1.0):
            raise InputError(f"score must lie in [0, 1], got {self.score}")


class Setting(str, enum.Enum):
    OPEN_VOCABULARY = "open-vocabulary"
    OPEN_ENDED = "open-ended"
    OPEN_SUBCLASS = "open-subclass"

    @classmethod
    def parse(cls, value: "str | Setting") -> "Setting":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {"ov": "open-vocabulary", "oe": "open-ended", "os": "open-subclass"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise InputError(f"unknown setting {value!r}") from None
