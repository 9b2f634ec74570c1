from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence


class TextEncoder(nn.Module):
    """Bi-LSTM caption encoder.

    Per-word features are the concatenated forward/backward hidden states
    (``d_w`` = 2 x hidden); the caption vector concatenates both final states.
    """

    def __init__(self, vocab_size: int, word_dim: int = 50, d_w: int = 256, dropout: float = 0.5,
                 init_vectors: np.ndarray | None = None):
        super().__init__()
        if d_w % 2:
            raise ValueError("d_w must be even")
        self.d_w = d_w
        self.embed = nn.Embedding(vocab_size, word_dim, padding_idx=0)
        if init_vectors is not None:
            with torch.no_grad():
                self.embed.weight.copy_(torch.as_tensor(init_vectors))
        self.drop = nn.Dropout(dropout)
        self.rnn = nn.LSTM(word_dim, d_w // 2, num_layers=1, batch_first=True, bidirectional=True)

    def forward(self, captions: torch.Tensor, cap_lens: torch.Tensor):
        """captions (B, T) ids, cap_lens (B,) -> words (B, d_w, T), sent (B, d_w), mask (B, T)."""
        if (cap_lens < 1).any():
            raise ValueError("empty caption: at least one word is required")
        B, T = captions.shape
        x = self.drop(self.embed(captions))
        packed = pack_padded_sequence(x, cap_lens.cpu(), batch_first=True, enforce_sorted=False)
        out, (h_n, _) = self.rnn(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=T)
        words = out.transpose(1, 2).contiguous()
        sent = torch.cat([h_n[0], h_n[1]], dim=1)
        mask = torch.arange(T, device=captions.device)[None, :] < cap_lens[:, None]
        return words, sent, mask

