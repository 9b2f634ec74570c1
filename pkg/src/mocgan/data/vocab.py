"""Token vocabulary and 50-d word vectors.

Word vectors come from a GloVe text file when one is configured.  Without
one, vectors are fit on the training captions with positive PMI + truncated
SVD, which keeps them distributional and deterministic.
"""
from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

PAD, UNK = "<pad>", "<unk>"
PAD_ID, UNK_ID = 0, 1


class Vocabulary:
    def __init__(self, tokens: list[str], embedding_table: np.ndarray | None = None, dim: int = 50):
        if tokens[:2] != [PAD, UNK]:
            tokens = [PAD, UNK] + [t for t in tokens if t not in (PAD, UNK)]
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if embedding_table is None:
            embedding_table = np.zeros((len(tokens), dim), dtype=np.float32)
        if embedding_table.shape[0] != len(tokens):
            raise ValueError("embedding table rows must match vocabulary size")
        self.embedding_table = embedding_table.astype(np.float32)
        self.embedding_table[PAD_ID] = 0.0
        self.embedding_table[UNK_ID] = 0.0

    def __len__(self):
        return len(self.itos)

    @property
    def dim(self) -> int:
        return self.embedding_table.shape[1]

    def encode(self, tokens: list[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.itos[int(i)] for i in ids if int(i) != PAD_ID]

    def phrase_vector(self, name: str) -> np.ndarray:
        """Mean word vector of a (possibly multi-word) name."""
        words = name.lower().split()
        rows = [self.embedding_table[self.stoi.get(w, UNK_ID)] for w in words]
        return np.mean(rows, axis=0).astype(np.float32)

    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode()).hexdigest()[:16]

    def save(self, directory: str | Path):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "vocab.json").write_text(json.dumps(self.itos))
        np.save(directory / "word_vectors.npy", self.embedding_table)

    @classmethod
    def load(cls, directory: str | Path) -> "Vocabulary":
        directory = Path(directory)
        tokens = json.loads((directory / "vocab.json").read_text())
        table = np.load(directory / "word_vectors.npy")
        return cls(tokens, table)


def load_glove(path: str | Path, words: set[str], dim: int = 50) -> dict[str, np.ndarray]:
    found = {}
    with open(path, encoding="utf8") as fh:
        for line in fh:
            parts = line.rstrip().split(" ")
            if parts[0] in words and len(parts) == dim + 1:
                found[parts[0]] = np.asarray(parts[1:], dtype=np.float32)
    return found


def ppmi_svd_vectors(sentences: list[list[str]], tokens: list[str], dim: int = 50, window: int = 4) -> np.ndarray:
    """Positive-PMI co-occurrence matrix factorized by SVD, rows unit-normalized."""
    index = {t: i for i, t in enumerate(tokens)}
    n = len(tokens)
    counts = np.zeros((n, n), dtype=np.float64)
    for sent in sentences:
        ids = [index[t] for t in sent if t in index]
        for a, i in enumerate(ids):
            for b in range(max(0, a - window), min(len(ids), a + window + 1)):
                if a != b:
                    counts[i, ids[b]] += 1.0
    total = counts.sum()
    vectors = np.zeros((n, dim), dtype=np.float32)
    if total == 0:
        return vectors
    row = counts.sum(1, keepdims=True)
    col = counts.sum(0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        pmi = np.log(counts * total / (row * col))
    ppmi = np.where(np.isfinite(pmi) & (pmi > 0), pmi, 0.0)
    u, s, _ = np.linalg.svd(ppmi)
    k = min(dim, len(s))
    emb = u[:, :k] * np.sqrt(s[:k])
    # fix SVD sign ambiguity so vectors are reproducible across LAPACK builds
    signs = np.sign(emb[np.abs(emb).argmax(0), np.arange(k)])
    emb = emb * np.where(signs == 0, 1.0, signs)
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    vectors[:, :k] = np.where(norms > 0, emb / np.maximum(norms, 1e-12), 0.0)
    return vectors


def build_vocabulary(
    captions: list[list[str]],
    category_names: list[str],
    dim: int = 50,
    glove_path: str | Path | None = None,
    min_count: int = 1,
) -> Vocabulary:
    counter = Counter(t for c in captions for t in c)
    for name in category_names:
        counter.update(name.lower().split())
    tokens = sorted(t for t, c in counter.items() if c >= min_count)
    category_words = {w for name in category_names for w in name.lower().split()}
    tokens = sorted(set(tokens) | category_words)
    all_tokens = [PAD, UNK] + tokens
    if glove_path:
        found = load_glove(glove_path, set(tokens), dim)
        table = np.zeros((len(all_tokens), dim), dtype=np.float32)
        for i, t in enumerate(all_tokens):
            if t in found:
                table[i] = found[t]
        missing = [w for w in category_words if w not in found]
        if missing:
            log.warning("no GloVe vector for category words: %s", sorted(missing))
    else:
        sentences = list(captions) + [n.lower().split() for n in category_names]
        table = ppmi_svd_vectors(sentences, all_tokens, dim)
    return Vocabulary(all_tokens, table)
