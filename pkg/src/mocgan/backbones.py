"""Frozen visual feature extractors.

``RegionEncoder`` gives 17x17 sub-region features and a global vector
(Inception-v3 ``Mixed_6e`` / final pool), each followed by a learned linear
map into the matching space.  ``CropEncoder`` is a VGG19 trunk used for the
phrase discriminator and the perceptual loss.

``backbone="stub"`` swaps both trunks for small randomly initialized CNNs with
identical output shapes, so everything runs without pretrained weights.
"""
from __future__ import annotations

import hashlib
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .nn_utils import crop_and_resize, freeze, union_boxes

REGION_GRID = 17
N_REGIONS = REGION_GRID * REGION_GRID
INCEPTION_SIZE = 299
CROP_SIZE = 128
_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


class BackboneWeightsError(RuntimeError):
    pass


def _imagenet_norm(x: torch.Tensor) -> torch.Tensor:
    mean = x.new_tensor(_IMAGENET_MEAN).view(1, 3, 1, 1)
    std = x.new_tensor(_IMAGENET_STD).view(1, 3, 1, 1)
    return ((x + 1) / 2 - mean) / std


def _seeded_init(module: nn.Module, seed: int):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
    return module


def _file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def _require(path: str, what: str):
    if not path or not Path(path).exists():
        raise BackboneWeightsError(
            f"{what} weights not found at {path!r}. Download the torchvision ImageNet weights "
            f"(e.g. torchvision.models.{what}(weights='DEFAULT') then torch.save(model.state_dict(), PATH)) "
            f"and set model.{'inception' if what == 'inception_v3' else 'vgg'}_weights in the config, "
            "or use model.backbone=stub."
        )


class _StubInception(nn.Module):
    def __init__(self):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3, 32, 3, 2, 1), nn.ReLU(),
            nn.Conv2d(32, 64, 3, 2, 1), nn.ReLU(),
            nn.Conv2d(64, 768, 1),
        )
        self.top = nn.Linear(768, 2048)
        _seeded_init(self, 1234)

    def forward(self, x):
        x = F.interpolate(x, size=(4 * REGION_GRID, 4 * REGION_GRID), mode="area")
        local = self.body(x)
        return local, F.relu(self.top(local.mean((2, 3))))


class _TorchvisionInception(nn.Module):
    def __init__(self, weights: str):
        super().__init__()
        from torchvision.models import inception_v3

        _require(weights, "inception_v3")
        net = inception_v3(weights=None, aux_logits=False, init_weights=False, transform_input=False)
        state = torch.load(weights, map_location="cpu")
        net.load_state_dict({k: v for k, v in state.items() if not k.startswith("AuxLogits")}, strict=False)
        self.net = net

    def forward(self, x):
        n = self.net
        x = _imagenet_norm(x)
        for name in ("Conv2d_1a_3x3", "Conv2d_2a_3x3", "Conv2d_2b_3x3", "maxpool1", "Conv2d_3b_1x1",
                     "Conv2d_4a_3x3", "maxpool2", "Mixed_5b", "Mixed_5c", "Mixed_5d", "Mixed_6a",
                     "Mixed_6b", "Mixed_6c", "Mixed_6d", "Mixed_6e"):
            x = getattr(n, name)(x)
        local = x
        for name in ("Mixed_7a", "Mixed_7b", "Mixed_7c"):
            x = getattr(n, name)(x)
        return local, F.adaptive_avg_pool2d(x, 1).flatten(1)


def _preprocess_region(images: torch.Tensor, random_crop: bool, generator: torch.Generator | None) -> torch.Tensor:
    """Resize the shorter side, then crop 299x299 (random in training, center otherwise)."""
    big = int(INCEPTION_SIZE * 76 / 64)
    x = F.interpolate(images, size=(big, big), mode="bilinear", align_corners=False)
    slack = big - INCEPTION_SIZE
    if random_crop:
        ox, oy = torch.randint(0, slack + 1, (2,), generator=generator).tolist()
    else:
        ox = oy = slack // 2
    return x[:, :, oy:oy + INCEPTION_SIZE, ox:ox + INCEPTION_SIZE]


class RegionEncoder(nn.Module):
    """Image -> (f: (B, d, 289), f_bar: (B, d)).  Only the two projections are trainable."""

    def __init__(self, d: int = 128, backbone: str = "stub", weights: str = ""):
        super().__init__()
        if backbone == "stub":
            self.trunk = _StubInception()
            self.provenance = "stub-inception-1234"
        elif backbone == "pretrained":
            self.trunk = _TorchvisionInception(weights)
            self.provenance = _file_hash(weights)
        else:
            raise ValueError(f"unknown backbone {backbone!r}")
        freeze(self.trunk)
        self.local_proj = nn.Linear(768, d)
        self.global_proj = nn.Linear(2048, d)

    def trunk_features(self, images, random_crop=False, generator=None):
        x = _preprocess_region(images, random_crop, generator)
        if x.shape[-1] != INCEPTION_SIZE:
            raise ValueError("region encoder input must be 299x299 after preprocessing")
        return self.trunk(x)

    def forward(self, images, random_crop=False, generator=None):
        local, pooled = self.trunk_features(images, random_crop, generator)
        f = self.local_proj(local.flatten(2).transpose(1, 2)).transpose(1, 2)
        return f, self.global_proj(pooled)


_VGG_TAPS = (3, 8, 17, 26, 35)  # relu1_2, relu2_4, relu3_4, relu4_4, relu5_4 in torchvision's vgg19.features


class _StubVGG(nn.Module):
    """Five stages like VGG19 (five taps, 512 channels at 1/32 scale), but thin:
    the first stage is a stride-2 conv, so crops stay cheap on CPU."""

    def __init__(self):
        super().__init__()
        widths = (3, 8, 16, 32, 64)
        self.stages = nn.ModuleList(
            [nn.Sequential(nn.Conv2d(3, 8, 3, 2, 1), nn.ReLU())]
            + [nn.Sequential(nn.Conv2d(widths[i], widths[i + 1], 3, 1, 1), nn.ReLU()) for i in range(1, 4)]
            + [nn.Sequential(nn.Conv2d(64, 512, 1), nn.ReLU())]
        )
        _seeded_init(self, 4321)

    def forward(self, x):
        taps = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            taps.append(x)
            if i:
                x = F.max_pool2d(x, 2)
        return x, taps


class _TorchvisionVGG(nn.Module):
    def __init__(self, weights: str):
        super().__init__()
        from torchvision.models import vgg19

        _require(weights, "vgg19")
        net = vgg19(weights=None)
        net.load_state_dict(torch.load(weights, map_location="cpu"))
        self.features = net.features

    def forward(self, x):
        taps = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in _VGG_TAPS:
                taps.append(x)
        return x, taps


class CropEncoder(nn.Module):
    """Frozen VGG19 trunk: image -> (last max-pool map, five pre-pool taps)."""

    def __init__(self, backbone: str = "stub", weights: str = ""):
        super().__init__()
        if backbone == "stub":
            self.trunk = _StubVGG()
            self.provenance = "stub-vgg-4321"
        elif backbone == "pretrained":
            self.trunk = _TorchvisionVGG(weights)
            self.provenance = _file_hash(weights)
        else:
            raise ValueError(f"unknown backbone {backbone!r}")
        freeze(self)

    def forward(self, images):
        return self.trunk(_imagenet_norm(images))

    def crop_features(self, images, boxes, img_index):
        """Crop normalized boxes, resize to 128x128 and encode -> (N, 512, 4, 4)."""
        crops = crop_and_resize(images, boxes, img_index, CROP_SIZE)
        return self(crops)[0]


def extract_crop_features(encoder: CropEncoder, image: torch.Tensor, box) -> torch.Tensor:
    """Single image (3, H, W) and box -> (512, 4, 4)."""
    box = torch.as_tensor(box, dtype=image.dtype).view(1, 4)
    return encoder.crop_features(image[None], box, torch.zeros(1, dtype=torch.long))[0]


def predicate_box(sub_box, obj_box):
    """Union of subject and object boxes."""
    return union_boxes(torch.as_tensor(sub_box), torch.as_tensor(obj_box))
