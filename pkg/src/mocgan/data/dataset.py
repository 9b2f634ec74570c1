"""COCO-style annotation ingestion, deterministic splits and example loading."""
from __future__ import annotations

import json
import logging
from collections import OrderedDict, defaultdict
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .records import ImageRecord, TrainingExample, filter_instances, normalize_box, tokenize
from .vocab import PAD_ID, Vocabulary, build_vocabulary

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class DatasetConfigError(RuntimeError):
    """Missing or unreadable annotation files."""


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise DatasetConfigError(f"annotation file not found: {path}") from exc


def _find(ann_dir: Path, stem: str) -> Path | None:
    exact = ann_dir / f"{stem}.json"
    if exact.exists():
        return exact
    matches = sorted(ann_dir.glob(f"{stem}*.json"))
    return matches[0] if matches else None


def read_annotations(instances: Path, captions: Path, stuff: Path | None, root: Path, image_subdir: str = ""):
    """Parse one instances/captions(/stuff) triple into records and a category table."""
    inst = _read_json(instances)
    caps = _read_json(captions)
    categories = {c["id"]: c["name"] for c in inst["categories"]}
    anns = list(inst["annotations"])
    if stuff is not None:
        st = _read_json(stuff)
        categories.update({c["id"]: c["name"] for c in st["categories"] if c["name"] != "other"})
        anns += [a for a in st["annotations"] if a["category_id"] in categories]
    by_image = defaultdict(list)
    for a in anns:
        if a.get("iscrowd", 0):
            continue
        x, y, w, h = a["bbox"]
        by_image[a["image_id"]].append((a["id"], a["category_id"], (x, y, x + w, y + h)))
    cap_by_image = defaultdict(list)
    for c in sorted(caps["annotations"], key=lambda c: c["id"]):
        cap_by_image[c["image_id"]].append(tokenize(c["caption"]))
    prefix = Path("images") / image_subdir if image_subdir and (root / "images" / image_subdir).is_dir() else Path("images")
    records = []
    for im in sorted(inst["images"], key=lambda m: m["id"]):
        objs = [(cat, box) for _, cat, box in sorted(by_image[im["id"]])]
        records.append(ImageRecord(
            image_id=im["id"], image_path=str(prefix / im["file_name"]),
            width=im["width"], height=im["height"], objects=objs,
            captions=cap_by_image[im["id"]][:5],
        ))
    return records, categories


def build_splits(
    dataset_dir: str | Path,
    seed: int = 0,
    min_objects: int = 3,
    max_objects: int = 8,
    min_area_frac: float = 0.02,
    split_ratio=(0.8, 0.1, 0.1),
    val_size: int = 1024,
    test_size: int = 2048,
    glove_path: str | None = None,
    embed_dim: int = 50,
):
    """Filter annotations, split them and write ``splits/`` under ``dataset_dir``.

    With ``instances_train*``/``instances_val*`` files present, train comes from
    the train annotations and val/test are drawn from the validation
    annotations only.  With a single ``instances.json`` the records are split by
    ``split_ratio``.
    """
    root = Path(dataset_dir)
    ann = root / "annotations"
    if not ann.is_dir():
        raise DatasetConfigError(f"no annotations directory under {root}")
    rng = np.random.default_rng(seed)
    train_inst = _find(ann, "instances_train")
    if train_inst is not None:
        val_inst = _find(ann, "instances_val")
        if val_inst is None:
            raise DatasetConfigError("instances_train found without instances_val")
        parts = {}
        categories = {}
        for split, inst in (("train", train_inst), ("val", val_inst)):
            cap = _find(ann, f"captions_{split}")
            if cap is None:
                raise DatasetConfigError(f"captions_{split}*.json not found in {ann}")
            recs, cats = read_annotations(inst, cap, _find(ann, f"stuff_{split}"), root, f"{split}2017")
            categories.update(cats)
            parts[split] = _filter_all(recs, min_area_frac, min_objects, max_objects)
        train = parts["train"]
        pool = [parts["val"][i] for i in rng.permutation(len(parts["val"]))]
        val, test = pool[:val_size], pool[val_size:]
        if len(test) != test_size:
            log.warning("test split has %d records (expected %d)", len(test), test_size)
    else:
        inst, cap = _find(ann, "instances"), _find(ann, "captions")
        if inst is None or cap is None:
            raise DatasetConfigError(f"instances.json / captions.json not found in {ann}")
        recs, categories = read_annotations(inst, cap, _find(ann, "stuff"), root)
        recs = _filter_all(recs, min_area_frac, min_objects, max_objects)
        n = len(recs)
        n_val = int(round(n * split_ratio[1]))
        n_test = int(round(n * split_ratio[2]))
        order = rng.permutation(n)
        shuffled = [recs[i] for i in order]
        train = shuffled[: n - n_val - n_test]
        val = shuffled[n - n_val - n_test: n - n_test]
        test = shuffled[n - n_test:]
        train.sort(key=lambda r: r.image_id)
    cat_ids = sorted(categories)
    meta = {
        "categories": [categories[c] for c in cat_ids],
        "category_ids": cat_ids,
        "seed": seed,
        "filter": {"min_objects": min_objects, "max_objects": max_objects, "min_area_frac": min_area_frac},
    }
    out = root / "splits"
    out.mkdir(exist_ok=True)
    for name, recs in zip(SPLITS, (train, val, test)):
        (out / f"{name}.json").write_text(json.dumps([r.to_json() for r in recs], sort_keys=True))
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    vocab = build_vocabulary([c for r in train for c in r.captions], meta["categories"], embed_dim, glove_path)
    vocab.save(out)
    return train, val, test


def _filter_all(records, min_area_frac, min_objects, max_objects):
    out = []
    for r in records:
        f = filter_instances(r, min_area_frac, min_objects, max_objects)
        if f is not None and f.captions:
            out.append(f)
    return out


def load_index(dataset_dir: str | Path, split: str) -> list[ImageRecord]:
    path = Path(dataset_dir) / "splits" / f"{split}.json"
    if not path.exists():
        raise DatasetConfigError(f"split index missing: {path} (run prepare-data first)")
    return [ImageRecord.from_json(d) for d in json.loads(path.read_text())]


def load_meta(dataset_dir: str | Path) -> dict:
    return _read_json(Path(dataset_dir) / "splits" / "meta.json")


def caption_ids(vocab: Vocabulary, tokens: list[str], max_len: int) -> tuple[np.ndarray, int]:
    ids = vocab.encode(tokens[:max_len])
    out = np.full(max_len, PAD_ID, dtype=np.int64)
    out[: len(ids)] = ids
    return out, len(ids)


class SceneDataset:
    """Read-only view over one split.

    ``load_example`` is pure given ``(i, epoch)``; ``batch(step)`` derives the
    sample stream from the seed alone, so a resumed run sees the same batches.
    """

    def __init__(self, dataset_dir, split="train", vocab=None, resolutions=(64, 128, 256),
                 max_caption_len=20, seed=0, cache=True):
        self.root = Path(dataset_dir)
        self.index = load_index(self.root, split)
        meta = load_meta(self.root)
        self.categories = meta["categories"]
        self.cat_to_label = {cid: i for i, cid in enumerate(meta["category_ids"])}
        self.vocab = vocab if vocab is not None else Vocabulary.load(self.root / "splits")
        self.resolutions = tuple(resolutions)
        self.max_caption_len = max_caption_len
        self.seed = seed
        self._cache = OrderedDict() if cache else None
        self._cache_size = 4096

    def __len__(self):
        return len(self.index)

    @property
    def n_categories(self) -> int:
        return len(self.categories)

    def _read_image(self, rec: ImageRecord, resolutions) -> dict | None:
        key = (rec.image_id, tuple(resolutions))
        if self._cache is not None and key in self._cache:
            return self._cache[key]
        try:
            with Image.open(self.root / rec.image_path) as im:
                im = im.convert("RGB")
                out = {}
                for r in resolutions:
                    arr = np.asarray(im.resize((r, r), Image.BILINEAR), dtype=np.float32)
                    out[r] = (arr.transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32)
        except (OSError, ValueError) as exc:
            log.warning("skipping unreadable image %s: %s", rec.image_path, exc)
            return None
        if self._cache is not None:
            self._cache[key] = out
            if len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)
        return out

    def load_example(self, i: int, resolution_set=None, epoch: int = 0) -> TrainingExample | None:
        """Example ``i``; returns ``None`` (with a logged diagnostic) if its image is unreadable."""
        if not 0 <= i < len(self.index):
            raise IndexError(i)
        rec = self.index[i]
        images = self._read_image(rec, resolution_set or self.resolutions)
        if images is None:
            return None
        rng = np.random.default_rng([self.seed, epoch, i])
        cap_idx = int(rng.integers(len(rec.captions)))
        ids, length = caption_ids(self.vocab, rec.captions[cap_idx], self.max_caption_len)
        labels = np.array([self.cat_to_label[c] for c, _ in rec.objects], dtype=np.int64)
        boxes = np.array([normalize_box(b, rec.width, rec.height) for _, b in rec.objects], dtype=np.float32)
        return TrainingExample(images, labels, boxes, ids, length, rec.image_id, cap_idx)

    def positions(self, step: int, batch_size: int) -> list[tuple[int, int]]:
        """(record position, epoch) pairs for one training step."""
        n = len(self.index)
        out = []
        for k in range(step * batch_size, (step + 1) * batch_size):
            epoch, offset = divmod(k, n)
            perm = np.random.default_rng([self.seed, epoch, 7]).permutation(n)
            out.append((int(perm[offset]), epoch))
        return out

    def batch(self, step: int, batch_size: int) -> dict:
        examples = [self.load_example(i, epoch=e) for i, e in self.positions(step, batch_size)]
        return collate([ex for ex in examples if ex is not None])


def collate(examples: list[TrainingExample]) -> dict:
    """Flatten variable-size object lists sg2im-style with an ``obj_to_img`` index."""
    if not examples:
        raise ValueError("empty batch")
    resolutions = sorted(examples[0].images)
    labels, boxes, obj_to_img = [], [], []
    for b, ex in enumerate(examples):
        labels.append(torch.from_numpy(ex.object_label_ids))
        boxes.append(torch.from_numpy(ex.boxes_gt))
        obj_to_img.append(torch.full((len(ex.object_label_ids),), b, dtype=torch.long))
    return {
        "images": {r: torch.from_numpy(np.stack([ex.images[r] for ex in examples])) for r in resolutions},
        "labels": torch.cat(labels),
        "boxes": torch.cat(boxes),
        "obj_to_img": torch.cat(obj_to_img),
        "captions": torch.from_numpy(np.stack([ex.caption_token_ids for ex in examples])),
        "cap_lens": torch.tensor([ex.caption_len for ex in examples], dtype=torch.long),
        "image_ids": [ex.image_id for ex in examples],
    }
