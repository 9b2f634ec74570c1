from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace

import numpy as np

log = logging.getLogger(__name__)

_PUNCT = re.compile(r"[^\w\s]")


@dataclass
class ImageRecord:
    """One annotated image.  Boxes are pixel ``(x0, y0, x1, y1)``."""

    image_id: int
    image_path: str
    width: int
    height: int
    objects: list = field(default_factory=list)  # [(category_id, (x0, y0, x1, y1))]
    captions: list = field(default_factory=list)  # [[token, ...], ...]

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "image_path": self.image_path,
            "width": self.width,
            "height": self.height,
            "objects": [[int(c), [float(v) for v in b]] for c, b in self.objects],
            "captions": [list(c) for c in self.captions],
        }

    @classmethod
    def from_json(cls, d: dict) -> "ImageRecord":
        return cls(
            image_id=d["image_id"],
            image_path=d["image_path"],
            width=d["width"],
            height=d["height"],
            objects=[(int(c), tuple(b)) for c, b in d["objects"]],
            captions=[list(c) for c in d["captions"]],
        )


@dataclass
class TrainingExample:
    images: dict  # resolution -> float32 array (3, r, r) in [-1, 1]
    object_label_ids: np.ndarray  # (n,) int64
    boxes_gt: np.ndarray  # (n, 4) float32, normalized
    caption_token_ids: np.ndarray  # (max_len,) int64, pad = 0
    caption_len: int
    image_id: int = -1
    caption_index: int = 0


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


def box_area(box) -> float:
    x0, y0, x1, y1 = box
    return max(0.0, x1 - x0) * max(0.0, y1 - y0)


def filter_instances(
    record: ImageRecord,
    min_area_frac: float = 0.02,
    min_objects: int = 3,
    max_objects: int = 8,
) -> ImageRecord | None:
    """Drop small objects, then reject records outside the object-count range.

    Returns ``None`` for a rejected record.
    """
    for _, box in record.objects:
        x0, y0, x1, y1 = box
        if not (x1 > x0 and y1 > y0):
            log.warning("image %s: malformed box %s, record rejected", record.image_id, box)
            return None
    min_area = min_area_frac * record.width * record.height
    kept = [(c, b) for c, b in record.objects if box_area(b) >= min_area]
    if not (min_objects <= len(kept) <= max_objects):
        return None
    if len(kept) == len(record.objects):
        return record
    return replace(record, objects=kept)


def normalize_box(box, width: int, height: int) -> tuple:
    x0, y0, x1, y1 = box
    return (
        min(max(x0 / width, 0.0), 1.0),
        min(max(y0 / height, 0.0), 1.0),
        min(max(x1 / width, 0.0), 1.0),
        min(max(y1 / height, 0.0), 1.0),
    )
