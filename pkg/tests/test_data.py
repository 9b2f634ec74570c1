import hashlib
import json
import logging
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from mocgan.data import ImageRecord, SceneDataset, Vocabulary, build_splits, collate, filter_instances, tokenize
from mocgan.data.dataset import DatasetConfigError, caption_ids
from mocgan.data.records import normalize_box
from mocgan.data.synthetic import make_synthetic_dataset
from mocgan.data.vocab import PAD_ID, UNK_ID, ppmi_svd_vectors


def _rec(boxes, w=100, h=100):
    return ImageRecord(1, "x.png", w, h, [(i + 1, b) for i, b in enumerate(boxes)], [["a", "cat"]])


def test_filter_drops_small_objects():
    big = (0, 0, 20, 20)  # 4% of 100x100
    rec = _rec([big, big, big, big, (0, 0, 10, 10)])  # last is 1%
    out = filter_instances(rec, 0.02, 3, 8)
    assert len(out.objects) == 4


def test_filter_identity_when_all_pass():
    rec = _rec([(0, 0, 20, 20)] * 3)
    assert filter_instances(rec, 0.02, 3, 8) is rec


def test_filter_rejects_too_many_and_too_few():
    assert filter_instances(_rec([(0, 0, 20, 20)] * 10), 0.02, 3, 8) is None
    assert filter_instances(_rec([(0, 0, 20, 20)] * 2), 0.02, 3, 8) is None


def test_filter_rejects_malformed_box(caplog):
    with caplog.at_level(logging.WARNING):
        assert filter_instances(_rec([(0, 0, 20, 20)] * 3 + [(10, 10, 10, 30)]), 0.02, 3, 8) is None
    assert caplog.records


def test_normalize_box():
    assert normalize_box((64, 48, 320, 240), 640, 480) == pytest.approx((0.1, 0.1, 0.5, 0.5))


def test_tokenize_and_truncate():
    assert tokenize("A red, Block!") == ["a", "red", "block"]
    vocab = Vocabulary(["w"])
    ids, n = caption_ids(vocab, ["w"] * 30, 20)
    assert n == 20 and ids.shape == (20,) and (ids != PAD_ID).all()


def test_vocab_roundtrip(tmp_path):
    v = Vocabulary(["red", "block"], np.ones((4, 3), np.float32))
    assert v.encode(["red", "zebra"]) == [2, UNK_ID]
    assert v.decode([2, 3, PAD_ID]) == ["red", "block"]
    assert not v.embedding_table[PAD_ID].any()
    v.save(tmp_path)
    w = Vocabulary.load(tmp_path)
    assert w.hash() == v.hash()


def test_ppmi_vectors_shape():
    vecs = ppmi_svd_vectors([["a", "red", "block"], ["a", "blue", "bar"]], ["a", "red", "block", "blue", "bar"], 50)
    assert vecs.shape == (5, 50)
    assert np.allclose(np.linalg.norm(vecs, axis=1)[np.linalg.norm(vecs, axis=1) > 0], 1, atol=1e-5)


def _dir_digest(d: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(d.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(d)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_synthetic_deterministic(tmp_path):
    a = make_synthetic_dataset(32, 5, 64, 7, tmp_path / "a")
    b = make_synthetic_dataset(32, 5, 64, 7, tmp_path / "b")
    assert _dir_digest(a) == _dir_digest(b)


def test_synthetic_records_pass_filter_and_fill_boxes(toy_dir):
    inst = json.loads((toy_dir / "annotations" / "instances.json").read_text())
    meta = {im["id"]: im for im in inst["images"]}
    by_img = {}
    for a in inst["annotations"]:
        by_img.setdefault(a["image_id"], []).append(a)
    for image_id, anns in by_img.items():
        im = meta[image_id]
        rec = ImageRecord(image_id, im["file_name"], im["width"], im["height"],
                          [(a["category_id"], (a["bbox"][0], a["bbox"][1], a["bbox"][0] + a["bbox"][2],
                                               a["bbox"][1] + a["bbox"][3])) for a in anns], [["x"]])
        assert filter_instances(rec, 0.02, 3, 8) is rec
        arr = np.asarray(Image.open(toy_dir / "images" / im["file_name"]).convert("RGB")).astype(int)
        bg = arr[0, 0]
        drawn = (np.abs(arr - bg).sum(-1) > 0)
        for _, (x0, y0, x1, y1) in rec.objects:
            box = np.zeros_like(drawn)
            box[int(y0):int(y1), int(x0):int(x1)] = True
            iou = (drawn & box).sum() / (drawn[int(y0):int(y1), int(x0):int(x1)] | box[int(y0):int(y1), int(x0):int(x1)]).sum()
            assert iou >= 0.9


def test_split_sizes_and_determinism(tmp_path):
    d = make_synthetic_dataset(20, 4, 64, 1, tmp_path / "d")
    train, val, test = build_splits(d, seed=5, split_ratio=(0.8, 0.1, 0.1))
    assert (len(train), len(val), len(test)) == (16, 2, 2)
    first = {p.name: p.read_bytes() for p in (d / "splits").iterdir()}
    build_splits(d, seed=5, split_ratio=(0.8, 0.1, 0.1))
    assert first == {p.name: p.read_bytes() for p in (d / "splits").iterdir()}


def test_missing_annotations_is_config_error(tmp_path):
    with pytest.raises(DatasetConfigError):
        build_splits(tmp_path)


def test_caption_sampling_reproducible(toy_dir):
    a = SceneDataset(toy_dir, "train", resolutions=(64,), seed=4)
    b = SceneDataset(toy_dir, "train", resolutions=(64,), seed=4, cache=False)
    picks_a = [a.load_example(0, epoch=e).caption_index for e in range(5)]
    picks_b = [b.load_example(0, epoch=e).caption_index for e in range(5)]
    assert picks_a == picks_b


def test_batches_are_pure_functions_of_step(toy_dataset):
    b1, b2 = toy_dataset.batch(3, 4), toy_dataset.batch(3, 4)
    assert b1["image_ids"] == b2["image_ids"]
    assert (b1["captions"] == b2["captions"]).all()
    assert b1["images"][64].shape == (4, 3, 64, 64)
    assert b1["images"][64].min() >= -1 and b1["images"][64].max() <= 1


def test_unreadable_image_skipped(toy_dir, tmp_path, caplog):
    ds = SceneDataset(toy_dir, "train", resolutions=(64,), seed=0, cache=False)
    ds.index = list(ds.index)
    ds.index[0] = ImageRecord(**{**ds.index[0].__dict__, "image_path": "images/missing.png"})
    with caplog.at_level(logging.WARNING):
        assert ds.load_example(0) is None
    assert "unreadable" in caplog.text


def test_collate_indexing(toy_dataset):
    exs = [toy_dataset.load_example(i) for i in range(3)]
    batch = collate(exs)
    counts = [len(e.object_label_ids) for e in exs]
    assert batch["obj_to_img"].tolist() == sum(([i] * c for i, c in enumerate(counts)), [])
    assert batch["boxes"].shape == (sum(counts), 4)
