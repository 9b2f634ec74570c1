"""Procedurally drawn stand-in for COCO.

Each image holds 3-8 non-overlapping patterned rectangles on a flat
background.  Every pattern fills its whole box, so the drawn footprint of an
object is exactly its annotated box.  Captions follow the template
``a <color> <shape> <relation> a <color> <shape>``.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

SHAPES = ("block", "stripe", "bar", "checker", "dot", "cross", "wave", "grid")
COLORS = {
    "red": (220, 30, 30),
    "green": (30, 170, 40),
    "blue": (30, 60, 220),
    "yellow": (235, 215, 20),
    "purple": (140, 40, 170),
    "orange": (245, 130, 20),
    "cyan": (20, 200, 210),
    "black": (15, 15, 15),
}
RELATION_WORDS = ("a", "left", "right", "of", "above", "below")
IMAGE_SIZE = 128
_GRID = 3
_MIN_SIDE, _MAX_SIDE = 20, 40


def _pattern_mask(shape: str, h: int, w: int) -> np.ndarray:
    """Boolean map of where the darker shade goes inside an h x w box."""
    yy, xx = np.mgrid[0:h, 0:w]
    if shape == "block":
        return np.zeros((h, w), bool)
    if shape == "stripe":
        return (yy // 4) % 2 == 1
    if shape == "bar":
        return (xx // 4) % 2 == 1
    if shape == "checker":
        return ((yy // 5) + (xx // 5)) % 2 == 1
    if shape == "dot":
        return ((yy % 6) < 2) & ((xx % 6) < 2)
    if shape == "cross":
        return (np.abs(yy - h // 2) < max(2, h // 8)) | (np.abs(xx - w // 2) < max(2, w // 8))
    if shape == "wave":
        return ((xx + yy) // 4) % 2 == 1
    if shape == "grid":
        return (yy % 7 == 0) | (xx % 7 == 0)
    raise ValueError(shape)


def _relation(a, b) -> str:
    ax, ay = (a[0] + a[2]) / 2, (a[1] + a[3]) / 2
    bx, by = (b[0] + b[2]) / 2, (b[1] + b[3]) / 2
    dx, dy = bx - ax, by - ay
    if abs(dx) >= abs(dy):
        return "left of" if dx > 0 else "right of"
    return "above" if dy > 0 else "below"


def render_scene(rng: np.random.Generator, n_categories: int, colors: list[str]):
    """Draw one scene.  Returns (uint8 image, background rgb, objects, object colors)."""
    size = IMAGE_SIZE
    bg = np.array([rng.integers(150, 200), rng.integers(150, 200), rng.integers(150, 200)], dtype=np.uint8)
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = bg
    n = int(rng.integers(3, 9))
    cells = rng.permutation(_GRID * _GRID)[:n]
    cell = size // _GRID
    objects, obj_colors = [], []
    for c in cells:
        cy, cx = divmod(int(c), _GRID)
        w = int(rng.integers(_MIN_SIDE, min(_MAX_SIDE, cell) + 1))
        h = int(rng.integers(_MIN_SIDE, min(_MAX_SIDE, cell) + 1))
        x0 = cx * cell + int(rng.integers(0, cell - w + 1))
        y0 = cy * cell + int(rng.integers(0, cell - h + 1))
        cat = int(rng.integers(0, n_categories))
        color = colors[int(rng.integers(0, len(colors)))]
        rgb = np.array(COLORS[color], dtype=np.float32)
        patch = np.empty((h, w, 3), dtype=np.uint8)
        patch[:] = rgb.astype(np.uint8)
        patch[_pattern_mask(SHAPES[cat], h, w)] = (rgb * 0.45).astype(np.uint8)
        img[y0:y0 + h, x0:x0 + w] = patch
        objects.append((cat, (x0, y0, x0 + w, y0 + h)))
        obj_colors.append(color)
    return img, bg, objects, obj_colors


def make_captions(rng: np.random.Generator, objects, obj_colors, n_captions: int = 5) -> list[str]:
    n = len(objects)
    pairs = [(i, k) for i in range(n) for k in range(n) if i != k]
    order = rng.permutation(len(pairs))[:n_captions]
    captions = []
    for p in order:
        i, k = pairs[int(p)]
        (ci, bi), (ck, bk) = objects[i], objects[k]
        captions.append(
            f"a {obj_colors[i]} {SHAPES[ci]} {_relation(bi, bk)} a {obj_colors[k]} {SHAPES[ck]}"
        )
    return captions


def make_synthetic_dataset(
    n_images: int,
    n_categories: int,
    vocab_size: int,
    seed: int,
    out_dir: str | Path,
) -> Path:
    """Write a COCO-style toy dataset to ``out_dir`` and return its path.

    ``vocab_size`` caps the number of distinct caption words; the color palette
    is trimmed to fit.
    """
    if not 3 <= n_categories <= len(SHAPES):
        raise ValueError(f"n_categories must be in [3, {len(SHAPES)}]")
    n_colors = min(len(COLORS), vocab_size - n_categories - len(RELATION_WORDS))
    if n_colors < 1:
        raise ValueError("vocab_size too small for the caption template")
    colors = list(COLORS)[:n_colors]
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    images, anns, caps = [], [], []
    ann_id = cap_id = 0
    for image_id in range(n_images):
        img, _, objects, obj_colors = render_scene(rng, n_categories, colors)
        name = f"{image_id:06d}.png"
        Image.fromarray(img).save(out / "images" / name, optimize=False)
        images.append({"id": image_id, "file_name": name, "width": IMAGE_SIZE, "height": IMAGE_SIZE})
        for cat, (x0, y0, x1, y1) in objects:
            anns.append({
                "id": ann_id, "image_id": image_id, "category_id": cat + 1,
                "bbox": [x0, y0, x1 - x0, y1 - y0], "area": (x1 - x0) * (y1 - y0), "iscrowd": 0,
            })
            ann_id += 1
        for text in make_captions(rng, objects, obj_colors):
            caps.append({"id": cap_id, "image_id": image_id, "caption": text})
            cap_id += 1
    categories = [{"id": i + 1, "name": SHAPES[i]} for i in range(n_categories)]
    _dump(out / "annotations" / "instances.json", {"images": images, "annotations": anns, "categories": categories})
    _dump(out / "annotations" / "captions.json", {"images": images, "annotations": caps})
    return out


def _dump(path: Path, obj):
    path.write_text(json.dumps(obj, sort_keys=True, indent=1))
