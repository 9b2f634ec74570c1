"""End-to-end model bundle: frozen encoders plus the trainable generator."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .backbones import CropEncoder, RegionEncoder
from .config import Config
from .data.vocab import Vocabulary
from .generator import Generator
from .implicit_graph import GraphBuilder, build_pairs
from .nn_utils import freeze
from .text_encoder import TextEncoder


def category_vectors(vocab: Vocabulary, categories: list[str]) -> np.ndarray:
    return np.stack([vocab.phrase_vector(name) for name in categories])


def build_text_encoder(cfg: Config, vocab: Vocabulary) -> TextEncoder:
    m = cfg.model
    return TextEncoder(len(vocab), vocab.dim, m.d_w, m.te_dropout, vocab.embedding_table)


def build_graph(cfg: Config, vocab: Vocabulary, categories: list[str]) -> GraphBuilder:
    m = cfg.model
    return GraphBuilder(
        vocab.embedding_table, category_vectors(vocab, categories), m.d_w, m.d_p, m.noise_dim,
        m.ire_hidden, m.gconv_hidden, m.gconv_layers, m.head_hidden,
    )


class MocGAN(nn.Module):
    def __init__(self, cfg: Config, vocab: Vocabulary, categories: list[str]):
        super().__init__()
        m = cfg.model
        self.cfg = cfg
        self.categories = list(categories)
        self.text_encoder = build_text_encoder(cfg, vocab)
        self.graph = build_graph(cfg, vocab, categories)
        self.region = RegionEncoder(m.d_p, m.backbone, m.inception_weights)
        self.vgg = CropEncoder(m.backbone, m.vgg_weights)
        self.generator = Generator(m)

    def freeze_pretrained(self):
        """TE, IRE/IGE and the region projections never train after pretraining."""
        for module in (self.text_encoder, self.graph, self.region, self.vgg):
            freeze(module)
        return self

    def frozen_modules(self) -> dict:
        return {
            "text_encoder": self.text_encoder,
            "graph": self.graph,
            "region": self.region,
            "vgg": self.vgg,
        }

    def sample_noise(self, n_images: int, generator: torch.Generator | None = None) -> torch.Tensor:
        return torch.randn(n_images, self.cfg.model.noise_dim, generator=generator)

    def encode(self, batch: dict, z: torch.Tensor):
        """Caption -> words; objects + words -> implicit graph and its features."""
        words, sent, mask = self.text_encoder(batch["captions"], batch["cap_lens"])
        pairs = build_pairs(batch["obj_to_img"])
        graph, feats, beta = self.graph(batch["labels"], batch["obj_to_img"], batch["captions"], words, mask, z, pairs)
        return {"words": words, "sent": sent, "mask": mask, "graph": graph, "feats": feats, "beta": beta}

    def forward(self, batch: dict, z: torch.Tensor, boxes: torch.Tensor | None = None, n_stages: int | None = None,
                box_source: str | None = None):
        enc = self.encode(batch, z)
        feats = enc["feats"]
        boxes_pred = self.generator.box_regressor(feats.v_o)
        if boxes is None:
            source = box_source or self.cfg.model.box_source
            if source == "predicted":
                boxes = boxes_pred.detach()
            elif source == "ground_truth":
                boxes = batch["boxes"]
            else:
                raise ValueError(f"unknown box source {source!r}")
        hidden, images = self.generator(feats, enc["graph"], boxes, n_stages)
        enc.update(boxes_pred=boxes_pred, boxes_used=boxes, hidden=hidden, images=images)
        return enc
