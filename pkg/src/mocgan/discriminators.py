"""Patch-, object- and phrase-wise discriminators.

All outputs are raw logits; losses apply the logistic link.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn

from .backbones import CropEncoder
from .nn_utils import crop_and_resize, union_boxes


def _down(c_in, c_out, bn=True, act=True):
    layers = [nn.Conv2d(c_in, c_out, 4, 2, 1)]
    if bn:
        layers.append(nn.BatchNorm2d(c_out))
    if act:
        layers.append(nn.LeakyReLU(0.2))
    return layers


def _stem(resolution: int, base: int, width: int):
    """Extra stride-2 convs so inputs larger than ``base`` reach the table's input size."""
    n_extra = int(math.log2(resolution // base))
    if base * 2 ** n_extra != resolution:
        raise ValueError(f"unsupported resolution {resolution} (needs {base} * 2^k)")
    layers, c = [], 3
    for j in range(n_extra):
        c_out = max(8, width // 2 ** (n_extra - j))
        layers += [nn.Conv2d(c, c_out, 4, 2, 1), nn.LeakyReLU(0.2)]
        c = c_out
    return layers, c


class PatchDiscriminator(nn.Module):
    """Image -> 1x8x8 logit map.  With ``cond_dim`` > 0 the condition vector is
    broadcast over the 16x16 features and concatenated before the last stride."""

    def __init__(self, resolution=64, width=64, cond_dim=0):
        super().__init__()
        self.resolution = resolution
        self.cond_dim = cond_dim
        stem, c = _stem(resolution, 64, width)
        self.features = nn.Sequential(*stem, *_down(c, width), *_down(width, 2 * width))
        if cond_dim:
            self.out = nn.Sequential(nn.Conv2d(2 * width + cond_dim, 8 * width, 4, 2, 1), nn.Conv2d(8 * width, 1, 1))
        else:
            self.out = nn.Sequential(nn.Conv2d(2 * width, 4 * width, 4, 2, 1), nn.Conv2d(4 * width, 1, 1))

    def forward(self, image, cond=None):
        if image.shape[-1] != self.resolution:
            raise ValueError(f"patch discriminator built for {self.resolution}px, got {image.shape[-1]}px")
        x = self.features(image)
        if self.cond_dim:
            if cond is None:
                raise ValueError("conditional patch discriminator needs a condition vector")
            x = torch.cat([x, cond[:, :, None, None].expand(-1, -1, *x.shape[-2:])], dim=1)
        return self.out(x)


class ObjectDiscriminator(nn.Module):
    """Object crop (half the image side) -> (realness logit, class logits)."""

    def __init__(self, n_classes, image_resolution=64, width=64):
        super().__init__()
        self.crop_size = image_resolution // 2
        stem, c = _stem(self.crop_size, 32, width)
        self.features = nn.Sequential(
            *stem, *_down(c, width), *_down(width, 2 * width), nn.Conv2d(2 * width, 4 * width, 4, 2, 1),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
            nn.Linear(4 * width, 16 * width), nn.LeakyReLU(0.2),
        )
        self.real = nn.Linear(16 * width, 1)
        self.classify = nn.Linear(16 * width, n_classes)

    def crops(self, images, boxes, obj_to_img):
        return crop_and_resize(images, boxes, obj_to_img, self.crop_size)

    def forward_crops(self, crops):
        h = self.features(crops)
        return self.real(h).squeeze(1), self.classify(h)

    def forward(self, images, boxes, obj_to_img):
        return self.forward_crops(self.crops(images, boxes, obj_to_img))


class PhraseDiscriminator(nn.Module):
    """(subject, predicate-or-relation, object) -> 1x2x2 logit map.

    Unconditional: the predicate is the VGG feature of the union box (1536 channels).
    Conditional: the predicate slot holds the relation vector broadcast to 4x4 (1152).
    """

    def __init__(self, conditional=False, rel_dim=128, width=512):
        super().__init__()
        self.conditional = conditional
        c_in = 512 * 2 + (rel_dim if conditional else 512)
        self.in_channels = c_in
        self.net = nn.Sequential(
            nn.Conv2d(c_in, width, 3, 1, 0), nn.BatchNorm2d(width), nn.LeakyReLU(0.2), nn.Conv2d(width, 1, 1)
        )

    def forward(self, h_sub, middle, h_obj):
        if self.conditional:
            middle = middle[:, :, None, None].expand(-1, -1, *h_sub.shape[-2:])
        return self.net(torch.cat([h_sub, middle, h_obj], dim=1))


def phrase_features(vgg: CropEncoder, images, boxes, pair_index, phr_to_img):
    """VGG features of subject, union (predicate) and object crops for each phrase."""
    sb, ob = boxes[pair_index[:, 0]], boxes[pair_index[:, 1]]
    stacked = torch.cat([sb, union_boxes(sb, ob), ob])
    feats = vgg.crop_features(images, stacked, phr_to_img.repeat(3))
    return feats.chunk(3)


class Discriminators(nn.Module):
    def __init__(self, n_classes, resolutions, d_p=128, d_w=256, width=64, phrase_width=512,
                 use_patch=True, use_ig=True, use_caption=False, use_obj=True, use_phrase=True):
        super().__init__()
        self.resolutions = tuple(resolutions)
        self.patch_unc = nn.ModuleList([PatchDiscriminator(r, width) for r in resolutions]) if use_patch else None
        self.patch_ig = nn.ModuleList([PatchDiscriminator(r, width, d_p) for r in resolutions]) if use_ig else None
        self.patch_cap = nn.ModuleList([PatchDiscriminator(r, width, d_w) for r in resolutions]) if use_caption else None
        self.obj = ObjectDiscriminator(n_classes, resolutions[-1], width) if use_obj else None
        self.phr_unc = PhraseDiscriminator(False, d_p, phrase_width) if use_phrase else None
        self.phr_con = PhraseDiscriminator(True, d_p, phrase_width) if use_phrase else None
