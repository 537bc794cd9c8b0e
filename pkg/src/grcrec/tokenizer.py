"""Residual k-means item tokenizer and the semantic-ID -> item lookup."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractViolation


@dataclass
class Codebook:
    level: int  # 1-based
    centroids: np.ndarray  # (K_c, d)


@dataclass(frozen=True)
class SemanticId:
    tokens: tuple[int, ...]
    suffix: int = 0

    def model_tokens(self, suffix_size: int) -> tuple[int, ...]:
        """Length-L tokens with the suffix folded into the last level."""
        *head, last = self.tokens
        return (*head, last * suffix_size + self.suffix)


def _sq_dists(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeans(x: np.ndarray, k: int, rng: np.random.Generator, iters: int) -> np.ndarray:
    n = len(x)
    # k-means++ seeding
    idx = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[idx]).min(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # fewer distinct points than k: take the lowest unused index
            used = set(idx)
            nxt = next(i for i in range(n) if i not in used)
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        idx.append(nxt)
        d2 = np.minimum(d2, _sq_dists(x, x[[nxt]])[:, 0])
    centroids = x[idx].copy()

    for _ in range(iters):
        dists = _sq_dists(x, centroids)
        assign = dists.argmin(axis=1)
        own = dists[np.arange(n), assign]
        new = centroids.copy()
        for j in range(k):
            members = assign == j
            if members.any():
                new[j] = x[members].mean(axis=0)
            else:
                far = int(np.argmax(own))
                new[j] = x[far]
                own[far] = -1.0
        if np.array_equal(new, centroids):
            break
        centroids = new
    return centroids


def fit_codebooks(embeddings: np.ndarray, levels: int, size: int, seed: int, iters: int = 25) -> list[Codebook]:
    """Fit ``levels`` codebooks, each on the residual left by the previous ones."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ContractViolation(f"embeddings must be N x d, got {x.shape}")
    if len(x) < size:
        raise ConfigError(f"need at least {size} items for a codebook of size {size}, got {len(x)}")
    rng = np.random.default_rng(seed)
    residual = x.copy()
    books = []
    for level in range(1, levels + 1):
        centroids = _kmeans(residual, size, rng, iters)
        assign = _sq_dists(residual, centroids).argmin(axis=1)
        residual = residual - centroids[assign]
        books.append(Codebook(level, centroids))
    return books


def encode(embedding: np.ndarray, codebooks: list[Codebook]) -> SemanticId:
    return SemanticId(tuple(int(t) for t in encode_batch(np.asarray(embedding)[None, :], codebooks)[0]))


def encode_batch(embeddings: np.ndarray, codebooks: list[Codebook]) -> np.ndarray:
    """(N, L) integer codes; argmin ties resolve to the lowest centroid index."""
    residual = np.asarray(embeddings, dtype=np.float64).copy()
    codes = np.empty((len(residual), len(codebooks)), dtype=np.int64)
    for i, book in enumerate(codebooks):
        tok = _sq_dists(residual, book.centroids).argmin(axis=1)
        codes[:, i] = tok
        residual = residual - book.centroids[tok]
    return codes


def residual_errors(embeddings: np.ndarray, codebooks: list[Codebook]) -> list[float]:
    """Mean squared residual norm after each level."""
    residual = np.asarray(embeddings, dtype=np.float64).copy()
    out = []
    for book in codebooks:
        tok = _sq_dists(residual, book.centroids).argmin(axis=1)
        residual = residual - book.centroids[tok]
        out.append(float((residual**2).sum(axis=1).mean()))
    return out


def disambiguate(codes: np.ndarray, suffix_size: int | None = None) -> tuple[list[SemanticId], dict, int]:
    """Give colliding items distinct suffixes in item-id order.

    Returns (semantic ids, lookup from folded model tokens to item id, suffix size).
    ``suffix_size=None`` picks the smallest size that avoids collisions.
    """
    codes = np.asarray(codes)
    groups: dict[tuple[int, ...], list[int]] = {}
    for item, row in enumerate(codes):
        groups.setdefault(tuple(int(t) for t in row), []).append(item)
    needed = max((len(v) for v in groups.values()), default=1)
    if suffix_size is None:
        suffix_size = needed
    elif needed > suffix_size:
        raise ConfigError(f"suffix alphabet exhausted: {needed} items share one code; raise suffix_size to >= {needed}")
    sids: list[SemanticId | None] = [None] * len(codes)
    for key, items in groups.items():
        for rank, item in enumerate(items):
            sids[item] = SemanticId(key, rank)
    lookup = {sid.model_tokens(suffix_size): item for item, sid in enumerate(sids)}
    return sids, lookup, suffix_size


@dataclass
class Tokenizer:
    """Frozen codebooks plus the item <-> token tables used by every later stage."""

    codebooks: list[Codebook]
    semantic_ids: list[SemanticId]
    suffix_size: int
    seed: int = 0
    lookup: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lookup:
            self.lookup = {sid.model_tokens(self.suffix_size): i for i, sid in enumerate(self.semantic_ids)}
        self.item_tokens = np.array(
            [sid.model_tokens(self.suffix_size) for sid in self.semantic_ids], dtype=np.int64
        ).reshape(len(self.semantic_ids), self.levels)

    @classmethod
    def fit(cls, embeddings, levels: int = 4, size: int = 32, seed: int = 0, suffix_size: int | None = None,
            iters: int = 25):
        books = fit_codebooks(embeddings, levels, size, seed, iters)
        sids, lookup, s = disambiguate(encode_batch(embeddings, books), suffix_size)
        return cls(books, sids, s, seed, lookup)

    @property
    def levels(self) -> int:
        return len(self.codebooks)

    @property
    def codebook_size(self) -> int:
        return len(self.codebooks[0].centroids)

    @property
    def vocab_sizes(self) -> list[int]:
        """Per-level decoder vocabularies; the last level carries the suffix."""
        k = self.codebook_size
        return [k] * (self.levels - 1) + [k * self.suffix_size]

    def tokens_of(self, item: int) -> tuple[int, ...]:
        return tuple(int(t) for t in self.item_tokens[item])

    def item_of(self, tokens) -> int | None:
        """phi: folded tokens -> item id, or None for a code no item owns."""
        return self.lookup.get(tuple(int(t) for t in tokens))

    def to_json(self) -> dict:
        return {
            "levels": self.levels,
            "codebook_size": self.codebook_size,
            "suffix_size": self.suffix_size,
            "seed": self.seed,
            "centroids": [b.centroids.tolist() for b in self.codebooks],
            "items": [{"item": i, "tokens": list(s.tokens), "suffix": s.suffix} for i, s in enumerate(self.semantic_ids)],
        }

    @classmethod
    def from_json(cls, raw: dict) -> "Tokenizer":
        books = [Codebook(i + 1, np.array(c, dtype=np.float64)) for i, c in enumerate(raw["centroids"])]
        sids = [SemanticId(tuple(r["tokens"]), r["suffix"]) for r in sorted(raw["items"], key=lambda r: r["item"])]
        return cls(books, sids, raw["suffix_size"], raw["seed"])

    def save(self, path, header: dict | None = None) -> None:
        raw = self.to_json()
        if header:
            raw["header"] = header
        with open(path, "w") as fh:
            json.dump(raw, fh)

    @classmethod
    def load(cls, path) -> "Tokenizer":
        with open(path) as fh:
            return cls.from_json(json.load(fh))
