"""Box regression and the hidden feature aggregator.

Three semantic maps feed the generator: the phrase layout map (object and
relation vectors painted into boxes), the graph semantic map (the global
graph vector grown to image size) and the phrase-context map (per-pixel
attention over phrase features).  ``Aggregator`` fuses a stage's maps with
two residual blocks.
"""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import kernels
from .damsm import pad_sets
from .nn_utils import masked_softmax


class BoxRegressor(nn.Module):
    """Object vector -> normalized (x0, y0, x1, y1).

    Predicts a relative position and an extent per axis:
    ``w = eps + (1 - eps) * sigmoid(a_w)`` and ``x0 = sigmoid(a_x) * (1 - w)``,
    so every box is ordered, at least ``eps`` wide and inside [0, 1].
    """

    def __init__(self, d_p=128, hidden=512, min_extent=1.0 / 32):
        super().__init__()
        self.min_extent = min_extent
        self.net = nn.Sequential(nn.Linear(d_p, hidden), nn.ReLU(), nn.Linear(hidden, 4))

    def forward(self, v_o):
        raw = self.net(v_o)
        pos = torch.sigmoid(raw[:, :2])
        eps = self.min_extent
        ext = eps + (1 - eps) * torch.sigmoid(raw[:, 2:])
        lo = pos * (1 - ext)
        return torch.cat([lo, lo + ext], dim=1)


def compose_phrase_layout(v_o, v_r, boxes, pair_index, obj_to_img, phr_to_img, H, W,
                          merge="max", backend=None) -> torch.Tensor:
    """Batched layout maps (B, D, H, W).  Inputs are detached; rasterization has no gradient."""
    v_o_np = v_o.detach().cpu().numpy()
    v_r_np = v_r.detach().cpu().numpy()
    boxes_np = boxes.detach().cpu().numpy()
    pairs_np = pair_index.cpu().numpy()
    o2i = obj_to_img.cpu().numpy()
    p2i = phr_to_img.cpu().numpy()
    n_img = int(o2i.max()) + 1
    maps = []
    for b in range(n_img):
        objs = np.nonzero(o2i == b)[0]
        phrs = np.nonzero(p2i == b)[0]
        local = np.full(len(o2i), -1, dtype=np.int64)
        local[objs] = np.arange(len(objs))
        maps.append(kernels.compose_layout(
            v_o_np[objs], v_r_np[phrs], boxes_np[objs], local[pairs_np[phrs]], H, W, merge, backend
        ))
    return torch.from_numpy(np.stack(maps)).to(v_o.device)


def _check_resolution(h: int):
    if h < 4 or h % 4 or 2 ** int(round(math.log2(h))) != h:
        raise ValueError(f"resolution {h} must be a power of two >= 4")


class GraphSemanticMap(nn.Module):
    """Global graph vector -> (C_g, H, W) via a 4x4 seed and (upsample, conv, BN, ReLU) blocks."""

    def __init__(self, d_p=128, channels=64, max_resolution=256):
        super().__init__()
        _check_resolution(max_resolution)
        self.channels = channels
        self.seed = nn.Linear(d_p, channels * 16)
        n_blocks = int(math.log2(max_resolution // 4))
        self.blocks = nn.ModuleList([
            nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(channels, channels, 3, 1, 1),
                nn.BatchNorm2d(channels),
                nn.ReLU(),
            )
            for _ in range(n_blocks)
        ])

    def n_blocks_for(self, h: int) -> int:
        _check_resolution(h)
        n = int(math.log2(h // 4))
        if n > len(self.blocks):
            raise ValueError(f"graph semantic map built for at most {4 * 2 ** len(self.blocks)} px")
        return n

    def forward(self, u_bar, h: int):
        x = self.seed(u_bar).view(-1, self.channels, 4, 4)
        for block in self.blocks[: self.n_blocks_for(h)]:
            x = block(x)
        return x


class PhraseContext(nn.Module):
    """Per-pixel attention over an image's phrase features.

    Pixel features are projected to ``d_p`` by a 1x1 conv; weights are a
    softmax over phrases of their dot products.
    """

    def __init__(self, hidden_channels=64, d_p=128):
        super().__init__()
        self.proj = nn.Conv2d(hidden_channels, d_p, 1)

    def attention(self, h_prev, u, phr_to_img):
        B, _, H, W = h_prev.shape
        query = self.proj(h_prev).flatten(2).transpose(1, 2)  # (B, HW, d_p)
        u_pad, mask = pad_sets(u, phr_to_img, B)  # (B, T, d_p)
        if mask.shape[1] == 0:
            raise ValueError("no phrases to attend over")
        scores = query @ u_pad.transpose(1, 2)  # (B, HW, T)
        beta = masked_softmax(scores, mask[:, None, :].expand_as(scores), dim=2)
        return beta, u_pad

    def forward(self, h_prev, u, phr_to_img):
        B, _, H, W = h_prev.shape
        beta, u_pad = self.attention(h_prev, u, phr_to_img)
        c = beta @ u_pad  # (B, HW, d_p)
        return c.transpose(1, 2).reshape(B, -1, H, W)


class ResBlock(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(c_in, c_out, 3, 1, 1), nn.BatchNorm2d(c_out), nn.ReLU(),
            nn.Conv2d(c_out, c_out, 3, 1, 1), nn.BatchNorm2d(c_out),
        )
        self.skip = nn.Identity() if c_in == c_out else nn.Conv2d(c_in, c_out, 1)

    def forward(self, x):
        return self.body(x) + self.skip(x)


class Aggregator(nn.Module):
    """Concatenate a stage's maps and fuse them with two residual blocks."""

    def __init__(self, in_channels, fused_channels=256):
        super().__init__()
        self.in_channels = in_channels
        self.blocks = nn.Sequential(ResBlock(in_channels, fused_channels), ResBlock(fused_channels, fused_channels))

    def forward(self, *maps):
        sizes = {m.shape[-2:] for m in maps}
        if len(sizes) != 1:
            raise ValueError(f"mismatched spatial sizes in aggregator: {sorted(tuple(s) for s in sizes)}")
        x = torch.cat(maps, dim=1)
        if x.shape[1] != self.in_channels:
            raise ValueError(f"aggregator expects {self.in_channels} channels, got {x.shape[1]}")
        return self.blocks(x)


def stage_in_channels(stage: int, d_p: int, lig: int, hidden: int, lig_all_stages: bool = False) -> int:
    if stage == 0:
        return d_p + lig
    return hidden + 2 * d_p + (lig if lig_all_stages else 0)


def resize_like(x: torch.Tensor, size: int) -> torch.Tensor:
    if x.shape[-1] == size:
        return x
    if x.shape[-1] > size:
        return F.adaptive_avg_pool2d(x, size)
    return F.interpolate(x, size=(size, size), mode="nearest")
