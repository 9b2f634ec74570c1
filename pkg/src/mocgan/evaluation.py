"""Inception Score, Frechet distance and the sample-grid emitter.

At desk scale the "inception" network is ``ShapeClassifier``, a small CNN
trained on the synthetic shape classes.  Its softmax feeds IS and its
penultimate activations feed FID.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image, ImageDraw

log = logging.getLogger(__name__)

PSD_TOLERANCE = 1e-6


@dataclass
class ActivationStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.count < 2:
            raise ValueError("activation statistics need at least 2 samples")
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ValueError(f"covariance shape {self.cov.shape} does not match mean dimension {d}")
        if not np.allclose(self.cov, self.cov.T, atol=1e-10):
            raise ValueError("covariance is not symmetric")

    @classmethod
    def from_activations(cls, acts) -> "ActivationStats":
        a = np.asarray(acts, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] < 2:
            raise ValueError("need an (N >= 2, d) activation matrix")
        cov = np.cov(a, rowvar=False)
        return cls(a.mean(0), np.atleast_2d((cov + cov.T) / 2), a.shape[0])


def inception_score(probs, n_splits: int = 10) -> tuple[float, float]:
    """exp(E_x KL(p(y|x) || p(y))) per split; returns (mean, std) over splits."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("probs must be (N, C)")
    if len(p) < n_splits:
        raise ValueError(f"{len(p)} images cannot fill {n_splits} splits")
    scores = []
    for part in np.array_split(p, n_splits):
        marginal = part.mean(0, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            kl = np.where(part > 0, part * (np.log(part) - np.log(marginal)), 0.0).sum(1)
        scores.append(float(np.exp(kl.mean())))
    return float(np.mean(scores)), float(np.std(scores))


def _sqrtm_product(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    root = scipy.linalg.sqrtm(a @ b)
    if not np.isfinite(root).all():
        eps = PSD_TOLERANCE
        log.warning("singular covariance product in FID; adding %g to the diagonals", eps)
        offset = np.eye(a.shape[0]) * eps
        root = scipy.linalg.sqrtm((a + offset) @ (b + offset))
    if np.iscomplexobj(root):
        imag = np.abs(root.imag).max()
        if imag > 1e-3:
            raise ValueError(f"covariance square root has imaginary component {imag:.3g}")
        root = root.real
    return root


def fid(real: ActivationStats, fake: ActivationStats) -> float:
    """||mu_r - mu_f||^2 + tr(S_r + S_f - 2 (S_r S_f)^(1/2))."""
    if real.mean.shape != fake.mean.shape:
        raise ValueError("feature dimensions differ")
    for s in (real, fake):
        if np.linalg.eigvalsh(s.cov).min() < -PSD_TOLERANCE * max(1.0, np.abs(s.cov).max()):
            raise ValueError("covariance is not positive semidefinite")
    diff = real.mean - fake.mean
    if np.array_equal(real.cov, fake.cov) and not diff.any():
        return 0.0
    tr_root = np.trace(_sqrtm_product(real.cov, fake.cov))
    return float(max(diff @ diff + np.trace(real.cov) + np.trace(fake.cov) - 2 * tr_root, 0.0))


class ShapeClassifier(nn.Module):
    """Small CNN over 64x64 images: class logits plus a 64-d feature."""

    feature_dim = 64

    def __init__(self, n_classes: int):
        super().__init__()
        self.n_classes = n_classes
        chans = (3, 16, 32, 64, 64)
        layers = []
        for a, b in zip(chans, chans[1:]):
            layers += [nn.Conv2d(a, b, 3, 1, 1), nn.BatchNorm2d(b), nn.ReLU(), nn.MaxPool2d(2)]
        self.body = nn.Sequential(*layers, nn.AdaptiveAvgPool2d(1), nn.Flatten())
        self.head = nn.Linear(self.feature_dim, n_classes)

    def features(self, images):
        if images.shape[-1] != 64:
            images = F.interpolate(images, size=(64, 64), mode="bilinear", align_corners=False)
        return self.body(images)

    def forward(self, images):
        return self.head(self.features(images))


def label_distribution(labels: torch.Tensor, obj_to_img: torch.Tensor, n_images: int, n_classes: int) -> torch.Tensor:
    """Per-image class frequencies of its objects (soft classification target)."""
    counts = torch.zeros(n_images, n_classes)
    counts.index_put_((obj_to_img, labels), torch.ones(len(labels)), accumulate=True)
    return counts / counts.sum(1, keepdim=True)


def train_classifier(dataset, steps: int = 300, batch_size: int = 32, seed: int = 0, lr: float = 2e-3) -> ShapeClassifier:
    torch.manual_seed(seed)
    clf = ShapeClassifier(dataset.n_categories)
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    res = min(dataset.resolutions)
    clf.train()
    for step in range(steps):
        batch = dataset.batch(step, batch_size)
        target = label_distribution(batch["labels"], batch["obj_to_img"], len(batch["cap_lens"]), clf.n_classes)
        logits = clf(batch["images"][res])
        loss = -(target * F.log_softmax(logits, 1)).sum(1).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    return clf.eval()


@torch.no_grad()
def classify(clf: ShapeClassifier, images: torch.Tensor, chunk: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """(softmax probabilities, features) for a stack of images in [-1, 1]."""
    clf.eval()
    probs, feats = [], []
    for part in images.split(chunk):
        f = clf.features(part)
        feats.append(f.numpy())
        probs.append(torch.softmax(clf.head(f), 1).numpy())
    return np.concatenate(probs), np.concatenate(feats)


def save_classifier(clf: ShapeClassifier, path):
    torch.save({"n_classes": clf.n_classes, "state": clf.state_dict()}, path)


def load_classifier(path) -> ShapeClassifier:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    clf = ShapeClassifier(blob["n_classes"])
    clf.load_state_dict(blob["state"])
    return clf.eval()


def to_pil(image: torch.Tensor) -> Image.Image:
    arr = ((image.detach().clamp(-1, 1) + 1) * 127.5).round().byte().permute(1, 2, 0).cpu().numpy()
    return Image.fromarray(arr)


def _text_tile(lines: list[str], size: int) -> Image.Image:
    tile = Image.new("RGB", (size, size), "white")
    draw = ImageDraw.Draw(tile)
    y = 2
    for line in lines:
        for k in range(0, max(len(line), 1), max(size // 6, 1)):
            draw.text((2, y), line[k:k + max(size // 6, 1)], fill="black")
            y += 11
    return tile


def emit_sample_grid(rows: list[dict], out_path, tile: int | None = None) -> tuple[Path, int]:
    """Write one row per example: a caption/objects tile, then one tile per stage.

    Each row is ``{"caption": str, "objects": [str], "images": [tensor (3, h, w)]}``.
    Returns the path and the number of cells."""
    if not rows:
        raise ValueError("no examples for the grid")
    n_cols = 1 + max(len(r["images"]) for r in rows)
    tile = tile or max(img.shape[-1] for r in rows for img in r["images"])
    grid = Image.new("RGB", (n_cols * tile, len(rows) * tile), "white")
    for i, r in enumerate(rows):
        grid.paste(_text_tile([r["caption"], ", ".join(r["objects"])], tile), (0, i * tile))
        for j, img in enumerate(r["images"]):
            grid.paste(to_pil(img).resize((tile, tile), Image.NEAREST), ((j + 1) * tile, i * tile))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    grid.save(out_path, format="PNG")
    return out_path, len(rows) * n_cols
