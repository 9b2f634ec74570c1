"""Image generation from (objects, caption) queries or dataset batches."""
from __future__ import annotations

import torch

from .data.dataset import caption_ids
from .data.records import tokenize
from .data.vocab import Vocabulary
from .model import MocGAN


class QueryError(ValueError):
    pass


def query_batch(vocab: Vocabulary, categories: list[str], objects: list[str], caption: str,
                max_caption_len: int = 20, boxes=None) -> dict:
    """A one-image batch from object names and a caption."""
    lookup = {c.lower(): i for i, c in enumerate(categories)}
    unknown = [o for o in objects if o.lower() not in lookup]
    if unknown:
        raise QueryError(f"unknown object categories {unknown}; known: {sorted(lookup)}")
    if len(objects) < 2:
        raise QueryError("at least two objects are needed to form a phrase")
    tokens = tokenize(caption)
    if not tokens:
        raise QueryError("caption has no words")
    ids, length = caption_ids(vocab, tokens, max_caption_len)
    n = len(objects)
    if boxes is not None:
        boxes = torch.as_tensor(boxes, dtype=torch.float32).view(-1, 4)
        if len(boxes) != n:
            raise QueryError(f"{len(boxes)} boxes given for {n} objects")
    return {
        "images": {},
        "labels": torch.tensor([lookup[o.lower()] for o in objects], dtype=torch.long),
        "boxes": boxes,
        "obj_to_img": torch.zeros(n, dtype=torch.long),
        "captions": torch.from_numpy(ids)[None],
        "cap_lens": torch.tensor([length], dtype=torch.long),
        "image_ids": [0],
    }


def parse_boxes(text: str) -> list[list[float]]:
    """"x0,y0,x1,y1;x0,y0,x1,y1" -> nested lists (normalized coordinates)."""
    out = []
    for chunk in text.split(";"):
        vals = [float(v) for v in chunk.split(",")]
        if len(vals) != 4:
            raise QueryError(f"box {chunk!r} needs four numbers")
        out.append(vals)
    return out


@torch.no_grad()
def generate(model: MocGAN, batch: dict, seed: int, n_stages: int | None = None, box_source: str = "predicted"):
    """Deterministic given ``seed``: returns (images per stage, boxes used)."""
    model.eval()
    g = torch.Generator().manual_seed(seed)
    z = model.sample_noise(len(batch["cap_lens"]), g)
    boxes = None
    if box_source == "ground_truth":
        if batch.get("boxes") is None:
            raise QueryError("ground-truth box source needs boxes")
        boxes = batch["boxes"]
    out = model(batch, z, boxes=boxes, n_stages=n_stages, box_source=box_source)
    return out["images"], out["boxes_used"]
