"""Adversarial, reconstruction and box losses, and the weighted generator total."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .config import LAMBDA_DEFAULTS, LOSS_NAMES
from .damsm import NonFiniteLossError


@dataclass
class LossBundle:
    terms: dict  # name -> scalar tensor, keys are LOSS_NAMES
    weights: tuple = LAMBDA_DEFAULTS
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        missing = set(LOSS_NAMES) - set(self.terms)
        if missing:
            raise KeyError(f"loss bundle missing {sorted(missing)}")

    @property
    def total(self) -> torch.Tensor:
        return sum(w * self.terms[name] for w, name in zip(self.weights, LOSS_NAMES))

    def check_finite(self):
        bad = {k: float(torch.as_tensor(v).detach()) for k, v in self.terms.items() if not torch.isfinite(torch.as_tensor(v)).all()}
        if bad:
            raise NonFiniteLossError(f"non-finite generator loss terms: {bad}")

    def as_floats(self) -> dict:
        return {k: float(torch.as_tensor(v).detach()) for k, v in self.terms.items()}


def d_real_fake(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """-(E log sigmoid(D(real)) + E log(1 - sigmoid(D(fake))))."""
    return (F.binary_cross_entropy_with_logits(real_logits, torch.ones_like(real_logits))
            + F.binary_cross_entropy_with_logits(fake_logits, torch.zeros_like(fake_logits)))


def d_conditional(real_match: torch.Tensor, fake_match: torch.Tensor, real_mismatch: torch.Tensor) -> torch.Tensor:
    """Matched real -> 1; matched fake and mismatched real -> 0 at half weight each."""
    return (F.binary_cross_entropy_with_logits(real_match, torch.ones_like(real_match))
            + 0.5 * F.binary_cross_entropy_with_logits(fake_match, torch.zeros_like(fake_match))
            + 0.5 * F.binary_cross_entropy_with_logits(real_mismatch, torch.zeros_like(real_mismatch)))


def g_nonsaturating(fake_logits: torch.Tensor) -> torch.Tensor:
    """-E log sigmoid(D(fake))."""
    return F.binary_cross_entropy_with_logits(fake_logits, torch.ones_like(fake_logits))


def pixel_l1(real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    return (real - fake).abs().mean()


def perceptual_l1(taps_real: list, taps_fake: list) -> torch.Tensor:
    return sum((a - b).abs().mean() for a, b in zip(taps_real, taps_fake))


def box_l1(boxes_gt: torch.Tensor, boxes_pred: torch.Tensor, obj_to_img: torch.Tensor | None = None) -> torch.Tensor:
    """Sum over objects of the L1 box error; averaged over images when ``obj_to_img`` is given."""
    per_obj = (boxes_gt - boxes_pred).abs().sum(1)
    if obj_to_img is None:
        return per_obj.sum()
    n_img = int(obj_to_img.max()) + 1
    return per_obj.sum() / n_img
