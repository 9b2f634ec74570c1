"""Attention-based query-set / image matching score and its contrastive loss.

Shared by the word-level matcher (text encoder pretraining, words as
queries) and the phrase-level matcher (graph pretraining and the generator
loss term, phrases as queries).  All widths are generic.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .config import GammaConfig

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class MatchingBatch:
    queries: torch.Tensor  # (M, T, D) padded query sets
    query_mask: torch.Tensor  # (M, T) bool
    keys: torch.Tensor  # (M, D, R) region features
    global_queries: torch.Tensor  # (M, D)
    global_keys: torch.Tensor  # (M, D)


def pad_sets(rows: torch.Tensor, owner: torch.Tensor, n_sets: int):
    """Group rows (N, D) by ``owner`` into a zero-padded (n_sets, T_max, D) tensor plus mask."""
    counts = torch.bincount(owner, minlength=n_sets)
    t_max = int(counts.max())
    out = rows.new_zeros((n_sets, t_max, rows.shape[1]))
    mask = torch.zeros((n_sets, t_max), dtype=torch.bool, device=rows.device)
    order = torch.argsort(owner, stable=True)
    starts = torch.cumsum(counts, 0) - counts
    slot = torch.arange(len(owner), device=rows.device) - starts[owner[order]]
    out[owner[order], slot] = rows[order]
    mask[owner[order], slot] = True
    return out, mask


def cosine(a: torch.Tensor, b: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Cosine similarity; pairs with a zero-norm side score 0."""
    na, nb = a.norm(dim=dim), b.norm(dim=dim)
    denom = na * nb
    zero = denom == 0
    if zero.any():
        log.debug("cosine: %d zero-norm vector pair(s) scored as 0", int(zero.sum()))
    return (a * b).sum(dim) / torch.where(zero, torch.ones_like(denom), denom)


def region_context(u: torch.Tensor, f: torch.Tensor, gamma1: float, mask: torch.Tensor | None = None):
    """Region-context vector per query.

    u (..., T, D) queries; f (..., D, R) regions.  Similarities are first
    normalized over queries for every region, then sharpened by ``gamma1`` and
    normalized over regions for every query.  Returns (..., T, D).
    """
    if u.shape[-1] == 0 or f.shape[-1] == 0:
        raise ValueError("zero-width inputs to region_context")
    s = u @ f  # (..., T, R)
    if mask is not None:
        s = s.masked_fill(~mask[..., None], float("-inf"))
    s_bar = torch.softmax(s, dim=-2)
    if mask is not None:
        s_bar = s_bar.masked_fill(~mask[..., None], 0.0)
    alpha = torch.softmax(gamma1 * s_bar, dim=-1)
    return alpha @ f.transpose(-1, -2)


def aggregate_relevance(rel: torch.Tensor, gamma2: float, mask: torch.Tensor | None = None) -> torch.Tensor:
    """(1/gamma2) * log sum_i exp(gamma2 * rel_i) over the last axis."""
    z = gamma2 * rel
    if mask is not None:
        z = z.masked_fill(~mask, float("-inf"))
    return torch.logsumexp(z, dim=-1) / gamma2


def matching_score(u: torch.Tensor, f: torch.Tensor, gamma: GammaConfig, mask: torch.Tensor | None = None) -> torch.Tensor:
    """R(X, Y) for a query set u (T, D) against regions f (D, R); batched over leading dims."""
    if u.shape[-2] < 1:
        raise ValueError("matching_score needs at least one query")
    c = region_context(u, f, gamma.gamma1, mask)
    return aggregate_relevance(cosine(c, u), gamma.gamma2, mask)


def pairwise_scores(queries, query_mask, keys, gamma: GammaConfig) -> torch.Tensor:
    """S[i, j] = R(image i, query set j) for every image/query-set pair in the batch."""
    m = keys.shape[0]
    rows = []
    for i in range(m):
        f = keys[i].expand(queries.shape[0], -1, -1)
        rows.append(matching_score(queries, f, gamma, query_mask))
    return torch.stack(rows)


def contrastive_terms(scores: torch.Tensor, gamma3: float):
    """Negative log posteriors summed over the batch: (image->set, set->image)."""
    logits = gamma3 * scores
    l1 = -torch.diagonal(F.log_softmax(logits, dim=1)).sum()
    l2 = -torch.diagonal(F.log_softmax(logits, dim=0)).sum()
    return l1, l2


def posteriors(scores: torch.Tensor, gamma3: float):
    """(P(Y_j | X_i) rows, P(X_i | Y_j) columns)."""
    logits = gamma3 * scores
    return torch.softmax(logits, dim=1), torch.softmax(logits, dim=0)


def damsm_loss(batch: MatchingBatch, gamma: GammaConfig | None = None, return_terms: bool = False):
    """L^p_1 + L^p_2 + L^g_1 + L^g_2, summed over the batch."""
    gamma = gamma or GammaConfig()
    if batch.keys.shape[0] < 1:
        raise ValueError("damsm_loss needs at least one pair")
    local = pairwise_scores(batch.queries, batch.query_mask, batch.keys, gamma)
    glob = cosine(batch.global_keys[:, None, :], batch.global_queries[None, :, :])
    lp1, lp2 = contrastive_terms(local, gamma.gamma3)
    lg1, lg2 = contrastive_terms(glob, gamma.gamma3)
    total = lp1 + lp2 + lg1 + lg2
    if not torch.isfinite(total):
        raise NonFiniteLossError(
            f"non-finite DAMSM loss: terms={[float(t) for t in (lp1, lp2, lg1, lg2)]}, "
            f"local score range=({float(local.min())}, {float(local.max())}), "
            f"query norm max={float(batch.queries.norm(dim=-1).max())}"
        )
    if return_terms:
        return total, {"Lp1": lp1, "Lp2": lp2, "Lg1": lg1, "Lg2": lg2, "scores": local}
    return total


def uniform_loss_value(m: int) -> float:
    """Loss when every pairwise score is equal: four terms of M ln M each."""
    return 4 * m * math.log(m)
