"""Implicit graph construction.

The relation estimator turns every ordered object pair into a query over the
caption words and reads a relation vector off the attended word features.
The graph encoder runs graph convolutions over the resulting triples and
produces per-phrase features and one global graph vector per image.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .nn_utils import build_mlp, masked_softmax, scatter_mean


def build_pairs(obj_to_img: torch.Tensor):
    """All ordered pairs (i, k), i != k, within each image.

    Returns ``pair_index`` (T_p, 2) of global object positions and
    ``phr_to_img`` (T_p,).  Order: images ascending, then i, then k.
    """
    obj_to_img = obj_to_img.cpu()
    pairs, owners = [], []
    n_img = int(obj_to_img.max()) + 1 if obj_to_img.numel() else 0
    for b in range(n_img):
        idx = torch.nonzero(obj_to_img == b).flatten().tolist()
        if len(idx) < 2:
            raise ValueError(f"image {b} has {len(idx)} object(s); at least 2 are needed to form phrases")
        for i in idx:
            for k in idx:
                if i != k:
                    pairs.append((i, k))
                    owners.append(b)
    return torch.tensor(pairs, dtype=torch.long).view(-1, 2), torch.tensor(owners, dtype=torch.long)


@dataclass
class ImplicitGraph:
    object_label_ids: torch.Tensor  # (O,)
    object_embeddings: torch.Tensor  # (O, 128)
    relations: torch.Tensor  # (T_p, 128), v^ir
    pair_index: torch.Tensor  # (T_p, 2)
    obj_to_img: torch.Tensor  # (O,)
    phr_to_img: torch.Tensor  # (T_p,)


@dataclass
class GraphFeatures:
    v_o: torch.Tensor  # (O, D_p)
    v_r: torch.Tensor  # (T_p, D_p)
    u: torch.Tensor  # (T_p, D_p)
    u_bar: torch.Tensor  # (B, D_p)


class ImplicitRelationEstimator(nn.Module):
    def __init__(self, word_dim=50, noise_dim=50, hidden=300, d_w=256, d_p=128):
        super().__init__()
        self.query = nn.Sequential(
            nn.Linear(2 * word_dim + noise_dim, hidden), nn.ReLU(), nn.Linear(hidden, word_dim)
        )
        self.word_proj = nn.Linear(d_w, d_p)

    def phrase_queries(self, obj_glove, z, pair_index, phr_to_img):
        """q_j = MLP([o^g_i, z, o^g_k]) for each ordered pair."""
        s, o = pair_index[:, 0], pair_index[:, 1]
        return self.query(torch.cat([obj_glove[s], z[phr_to_img], obj_glove[o]], dim=1))

    def attend(self, q, word_glove, words, mask, phr_to_img):
        """Word attention per phrase.

        q (T_p, 50); word_glove (B, T, 50); words (B, d_w, T); mask (B, T).
        Returns v^ir (T_p, d_p) and the weights beta (T_p, T).
        """
        scores = torch.einsum("pd,ptd->pt", q, word_glove[phr_to_img])
        beta = masked_softmax(scores, mask[phr_to_img], dim=1)
        projected = self.word_proj(words.transpose(1, 2))  # (B, T, d_p)
        v_ir = torch.einsum("pt,ptd->pd", beta, projected[phr_to_img])
        return v_ir, beta

    def forward(self, obj_glove, z, word_glove, words, mask, pair_index, phr_to_img):
        q = self.phrase_queries(obj_glove, z, pair_index, phr_to_img)
        v_ir, beta = self.attend(q, word_glove, words, mask, phr_to_img)
        return v_ir, beta, q


class GraphConv(nn.Module):
    """One triple-wise graph convolution.

    Each edge's MLP proposes new (subject, predicate, object) vectors; a node's
    new vector is the mean of its proposals over every incident edge.
    """

    def __init__(self, dim=128, hidden=512):
        super().__init__()
        self.dim = dim
        self.net = build_mlp([3 * dim, hidden, 3 * dim], final_relu=True)

    def forward(self, obj_vecs, pred_vecs, pair_index):
        n_obj = obj_vecs.shape[0]
        s, o = pair_index[:, 0], pair_index[:, 1]
        incidence = torch.bincount(torch.cat([s, o]), minlength=n_obj)
        if (incidence == 0).any():
            raise ValueError("isolated node in graph convolution")
        out = self.net(torch.cat([obj_vecs[s], pred_vecs, obj_vecs[o]], dim=1))
        new_s, new_p, new_o = out.split(self.dim, dim=1)
        new_obj = scatter_mean(torch.cat([new_s, new_o]), torch.cat([s, o]), n_obj)
        return new_obj, new_p


class ImplicitGraphEncoder(nn.Module):
    def __init__(self, n_categories, d_p=128, gconv_hidden=512, n_layers=3, head_hidden=768):
        super().__init__()
        self.d_p = d_p
        self.obj_embedding = nn.Embedding(n_categories, d_p)
        self.layers = nn.ModuleList([GraphConv(d_p, gconv_hidden) for _ in range(n_layers)])
        w = 3 * d_p
        self.phrase_head = nn.Sequential(build_mlp([w, head_hidden, w]), nn.Linear(w, d_p))
        self.global_head = build_mlp([w, head_hidden, w])
        self.global_proj = nn.Linear(w, d_p)

    def forward(self, labels, v_ir, pair_index, phr_to_img, n_images):
        obj = self.obj_embedding(labels)
        pred = v_ir
        for layer in self.layers:
            obj, pred = layer(obj, pred, pair_index)
        triples = torch.cat([obj[pair_index[:, 0]], pred, obj[pair_index[:, 1]]], dim=1)
        u = self.phrase_head(triples)
        u_bar = self.global_proj(scatter_mean(self.global_head(triples), phr_to_img, n_images))
        return GraphFeatures(v_o=obj, v_r=pred, u=u, u_bar=u_bar)


class GraphBuilder(nn.Module):
    """IRE + IGE with the fixed word/category vector tables they read from."""

    def __init__(self, word_vectors: np.ndarray, category_vectors: np.ndarray, d_w=256, d_p=128,
                 noise_dim=50, ire_hidden=300, gconv_hidden=512, gconv_layers=3, head_hidden=768):
        super().__init__()
        self.register_buffer("word_vectors", torch.as_tensor(np.asarray(word_vectors, dtype=np.float32)))
        self.register_buffer("category_vectors", torch.as_tensor(np.asarray(category_vectors, dtype=np.float32)))
        word_dim = self.word_vectors.shape[1]
        self.noise_dim = noise_dim
        self.ire = ImplicitRelationEstimator(word_dim, noise_dim, ire_hidden, d_w, d_p)
        self.ige = ImplicitGraphEncoder(len(category_vectors), d_p, gconv_hidden, gconv_layers, head_hidden)

    def forward(self, labels, obj_to_img, captions, words, mask, z, pairs=None):
        n_images = captions.shape[0]
        pair_index, phr_to_img = pairs if pairs is not None else build_pairs(obj_to_img)
        pair_index, phr_to_img = pair_index.to(labels.device), phr_to_img.to(labels.device)
        v_ir, beta, q = self.ire(
            self.category_vectors[labels], z, self.word_vectors[captions], words, mask, pair_index, phr_to_img
        )
        feats = self.ige(labels, v_ir, pair_index, phr_to_img, n_images)
        graph = ImplicitGraph(labels, self.ige.obj_embedding(labels), v_ir, pair_index, obj_to_img, phr_to_img)
        return graph, feats, beta
