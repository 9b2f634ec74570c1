"""Small tensor helpers shared across modules."""
from __future__ import annotations

import types

import torch
import torch.nn as nn
import torch.nn.functional as F


def _stay_eval(self, mode=True):
    return nn.Module.train(self, False)


def freeze(module: nn.Module) -> nn.Module:
    """Stop gradients and pin the module in eval mode, even under ``parent.train()``."""
    for p in module.parameters():
        p.requires_grad_(False)
    module.train = types.MethodType(_stay_eval, module)
    module.eval()
    return module


def masked_softmax(scores: torch.Tensor, mask: torch.Tensor | None, dim: int = -1) -> torch.Tensor:
    """Softmax with masked-out entries receiving weight exactly 0."""
    if mask is None:
        return torch.softmax(scores, dim=dim)
    if not mask.any(dim=dim).all():
        raise ValueError("softmax over an all-masked axis")
    scores = scores.masked_fill(~mask, float("-inf"))
    return torch.softmax(scores, dim=dim)


def build_mlp(dims, final_relu=False) -> nn.Sequential:
    layers = []
    for i in range(len(dims) - 1):
        layers.append(nn.Linear(dims[i], dims[i + 1]))
        if i < len(dims) - 2 or final_relu:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


def scatter_mean(src: torch.Tensor, index: torch.Tensor, n: int) -> torch.Tensor:
    """Mean of ``src`` rows grouped by ``index`` into ``n`` buckets."""
    out = src.new_zeros((n,) + src.shape[1:])
    out.index_add_(0, index, src)
    counts = torch.bincount(index, minlength=n).to(src.dtype).clamp_min(1)
    return out / counts.view(-1, *([1] * (src.dim() - 1)))


def union_boxes(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.cat([torch.minimum(a[..., :2], b[..., :2]), torch.maximum(a[..., 2:], b[..., 2:])], dim=-1)


def crop_and_resize(images: torch.Tensor, boxes: torch.Tensor, img_index: torch.Tensor, size: int) -> torch.Tensor:
    """Bilinear crops of normalized ``(x0, y0, x1, y1)`` boxes, each resized to ``size``.

    images (B, C, H, W); boxes (N, 4); img_index (N,) -> (N, C, size, size).
    Differentiable w.r.t. ``images``.
    """
    if boxes.numel() == 0:
        return images.new_zeros((0, images.shape[1], size, size))
    if ((boxes[:, 2] <= boxes[:, 0]) | (boxes[:, 3] <= boxes[:, 1])).any():
        raise ValueError("degenerate crop box")
    n = boxes.shape[0]
    x0, y0, x1, y1 = boxes.unbind(1)
    theta = boxes.new_zeros((n, 2, 3))
    theta[:, 0, 0] = x1 - x0
    theta[:, 0, 2] = x0 + x1 - 1
    theta[:, 1, 1] = y1 - y0
    theta[:, 1, 2] = y0 + y1 - 1
    grid = F.affine_grid(theta, (n, images.shape[1], size, size), align_corners=False)
    return F.grid_sample(images[img_index], grid, mode="bilinear", padding_mode="border", align_corners=False)
