"""Cascaded refinement generator.

Stage 0 fuses the layout map with the graph semantic map at the base
resolution and refines from 4x4 up.  Every later stage fuses the previous
hidden map, the layout map and the phrase-context map at the previous
resolution, then refines once more to double it.
"""
from __future__ import annotations

import torch
import torch.nn as nn

from .config import ModelConfig
from .scene_composer import (
    Aggregator,
    BoxRegressor,
    GraphSemanticMap,
    PhraseContext,
    compose_phrase_layout,
    resize_like,
    stage_in_channels,
)


def _conv_block(c_in, c_out):
    return [nn.Conv2d(c_in, c_out, 3, 1, 1), nn.BatchNorm2d(c_out), nn.LeakyReLU(0.2)]


class CRM(nn.Module):
    """Cascaded refinement module: [semantic map @ out size, upsampled input] -> 2 conv blocks."""

    def __init__(self, sem_channels, in_channels, out_channels):
        super().__init__()
        self.in_channels = in_channels
        self.net = nn.Sequential(*_conv_block(sem_channels + in_channels, out_channels), *_conv_block(out_channels, out_channels))

    def forward(self, sem, x, out_size):
        parts = [resize_like(sem, out_size)]
        if x is not None:
            parts.append(nn.functional.interpolate(x, size=(out_size, out_size), mode="nearest"))
        return self.net(torch.cat(parts, dim=1))


class Refiner(nn.Module):
    def __init__(self, sem_channels, widths, first_size):
        super().__init__()
        self.first_size = first_size
        self.crms = nn.ModuleList()
        prev = 0
        for w in widths:
            self.crms.append(CRM(sem_channels, prev, w))
            prev = w

    def forward(self, fused):
        x, size = None, self.first_size
        for crm in self.crms:
            x = crm(fused, x, size)
            size *= 2
        return x


class OutputHead(nn.Module):
    def __init__(self, hidden=64):
        super().__init__()
        self.net = nn.Sequential(nn.Conv2d(hidden, hidden, 3, 1, 1), nn.LeakyReLU(0.2), nn.Conv2d(hidden, 3, 1))

    def forward(self, h):
        return torch.tanh(self.net(h))


class Generator(nn.Module):
    """Everything trainable on the generator side: box regressor, map builders, decoder."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        base = cfg.base_resolution
        if len(cfg.crm_channels) < 1 or cfg.crm_channels[-1] != cfg.hidden_channels:
            raise ValueError("crm_channels must end at hidden_channels")
        first = base // 2 ** (len(cfg.crm_channels) - 1)
        if first < 1 or first * 2 ** (len(cfg.crm_channels) - 1) != base:
            raise ValueError("crm_channels length incompatible with base_resolution")
        self.box_regressor = BoxRegressor(cfg.d_p, cfg.box_hidden, cfg.min_box_extent)
        top = base * 2 ** (cfg.n_stages - 1)
        self.graph_map = GraphSemanticMap(cfg.d_p, cfg.lig_channels, max(top // 2, base))
        self.contexts = nn.ModuleList([PhraseContext(cfg.hidden_channels, cfg.d_p) for _ in range(cfg.n_stages - 1)])
        self.aggregators = nn.ModuleList()
        self.refiners = nn.ModuleList()
        self.heads = nn.ModuleList()
        for i in range(cfg.n_stages):
            c_in = stage_in_channels(i, cfg.d_p, cfg.lig_channels, cfg.hidden_channels, cfg.lig_all_stages)
            self.aggregators.append(Aggregator(c_in, cfg.fused_channels))
            if i == 0:
                self.refiners.append(Refiner(cfg.fused_channels, cfg.crm_channels, first))
            else:
                self.refiners.append(Refiner(cfg.fused_channels, (2 * cfg.hidden_channels, cfg.hidden_channels), base * 2 ** (i - 1)))
            self.heads.append(OutputHead(cfg.hidden_channels))

    def stage_resolution(self, i: int) -> int:
        return self.cfg.base_resolution * 2 ** i

    def forward(self, feats, graph, boxes, n_stages=None):
        """Run the cascade.  Returns lists of hidden maps and images, one per stage."""
        n_stages = n_stages or self.cfg.n_stages
        if not 1 <= n_stages <= self.cfg.n_stages:
            raise ValueError(f"n_stages must be in [1, {self.cfg.n_stages}]")
        base = self.cfg.base_resolution

        def layout(size):
            return compose_phrase_layout(
                feats.v_o, feats.v_r, boxes, graph.pair_index, graph.obj_to_img, graph.phr_to_img,
                size, size, self.cfg.layout_merge,
            )

        lig = self.graph_map(feats.u_bar, base)
        hidden, images = [], []
        h = None
        for i in range(n_stages):
            if i == 0:
                fused = self.aggregators[0](layout(base), lig)
            else:
                size = h.shape[-1]
                maps = [h, layout(size), self.contexts[i - 1](h, feats.u, graph.phr_to_img)]
                if self.cfg.lig_all_stages:
                    maps.append(self.graph_map(feats.u_bar, size))
                fused = self.aggregators[i](*maps)
            h = self.refiners[i](fused)
            hidden.append(h)
            images.append(self.heads[i](h))
        return hidden, images
