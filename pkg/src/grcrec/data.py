"""Catalog and interaction corpora: synthetic generator, CSV ingestion, leave-one-out split."""

from __future__ import annotations

import csv
import json
import logging
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DataFormatError

log = logging.getLogger(__name__)

ATTRIBUTES = ("category", "brand")


@dataclass
class Item:
    item_id: int
    embedding: np.ndarray
    attributes: dict[str, int]


@dataclass
class Catalog:
    embeddings: np.ndarray  # (N, d)
    attributes: dict[str, np.ndarray]  # name -> (N,) bucket ids
    external_ids: list[str] | None = None

    def __len__(self) -> int:
        return len(self.embeddings)

    @property
    def attribute_names(self) -> tuple[str, ...]:
        return tuple(self.attributes)

    def item(self, i: int) -> Item:
        return Item(i, self.embeddings[i], {k: int(v[i]) for k, v in self.attributes.items()})

    def attrs_of(self, i: int | None) -> tuple[int, ...] | None:
        if i is None:
            return None
        return tuple(int(v[i]) for v in self.attributes.values())


@dataclass
class InteractionSequence:
    user_id: int
    items: list[int]
    timestamps: list[int] = field(default_factory=list)


@dataclass
class UserSplit:
    user_id: int
    train: list[int]
    valid: int
    test: int

    @property
    def test_history(self) -> list[int]:
        return self.train + [self.valid]


@dataclass
class SplitDataset:
    users: list[UserSplit]
    max_len: int

    def __len__(self) -> int:
        return len(self.users)


@dataclass
class SyntheticConfig:
    n_items: int = 500
    n_users: int = 2000
    n_categories: int = 10
    n_brands: int = 20
    d: int = 16
    min_len: int = 5
    max_len: int = 15
    n_successors: int = 4
    p_successor: float = 0.6
    p_same_category: float = 0.25
    seed: int = 0


def generate_synthetic(cfg: SyntheticConfig) -> tuple[Catalog, list[InteractionSequence]]:
    """Catalog with planted category/brand geometry and Markov user trajectories.

    Embedding = 4 * category centroid + 1.5 * brand offset + 1.5 * noise.  Each
    item has a few preferred successors inside its own category; the next item
    is a successor, a same-category item or a uniform item.
    """
    if cfg.n_items <= 0 or cfg.n_users <= 0:
        raise ConfigError("n_items and n_users must be positive")
    if cfg.n_items < cfg.n_categories:
        raise ConfigError("n_items must be >= n_categories")
    if cfg.d < 4:
        raise ConfigError("embedding dimension must be >= 4")
    if cfg.min_len < 3 or cfg.max_len < cfg.min_len:
        raise ConfigError("sequence lengths must satisfy 3 <= min_len <= max_len")
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_items
    category = rng.permutation(np.arange(n) % cfg.n_categories)
    brand = rng.integers(cfg.n_brands, size=n)
    cat_centroids = rng.normal(size=(cfg.n_categories, cfg.d))
    cat_centroids /= np.linalg.norm(cat_centroids, axis=1, keepdims=True)
    brand_offsets = rng.normal(size=(cfg.n_brands, cfg.d)) / np.sqrt(cfg.d)
    emb = 4.0 * cat_centroids[category] + 1.5 * brand_offsets[brand] + 1.5 * rng.normal(size=(n, cfg.d)) / np.sqrt(cfg.d)
    catalog = Catalog(emb, {"category": category.astype(np.int64), "brand": brand.astype(np.int64)})

    by_cat = [np.flatnonzero(category == c) for c in range(cfg.n_categories)]
    successors = [rng.choice(by_cat[category[i]], size=cfg.n_successors) for i in range(n)]

    seqs = []
    for u in range(cfg.n_users):
        length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        cur = int(rng.integers(n))
        items = [cur]
        for _ in range(length - 1):
            r = rng.random()
            if r < cfg.p_successor:
                cur = int(rng.choice(successors[cur]))
            elif r < cfg.p_successor + cfg.p_same_category:
                cur = int(rng.choice(by_cat[category[cur]]))
            else:
                cur = int(rng.integers(n))
            items.append(cur)
        stamps = np.cumsum(rng.integers(1, 100, size=length)).tolist()
        seqs.append(InteractionSequence(u, items, [int(t) for t in stamps]))
    return catalog, seqs


def _hashed_embedding(key: str, d: int) -> np.ndarray:
    return np.random.default_rng(zlib.crc32(key.encode())).normal(size=d)


def ingest_csv(interactions_path, items_path, d: int = 16) -> tuple[Catalog, list[InteractionSequence], int]:
    """Read ``user_id,item_id,timestamp`` and ``item_id,category,brand[,e1,e2,...]``.

    Returns (catalog, sequences, number of users dropped for having < 3 interactions).
    """
    ext_ids: list[str] = []
    index: dict[str, int] = {}
    cats: list[str] = []
    brands: list[str] = []
    embs: list[list[float] | None] = []
    with open(items_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["item_id", "category", "brand"]:
            raise DataFormatError(items_path, 1, "header must start with item_id,category,brand")
        for lineno, row in enumerate(reader, start=2):
            if len(row) < 3:
                raise DataFormatError(items_path, lineno, f"expected >= 3 fields, got {len(row)}")
            key = row[0].strip()
            if key in index:
                raise DataFormatError(items_path, lineno, f"duplicate item_id {key!r}")
            vec = None
            if len(row) > 3 and any(c.strip() for c in row[3:]):
                try:
                    vec = [float(c) for c in row[3:]]
                except ValueError:
                    raise DataFormatError(items_path, lineno, "non-numeric embedding value") from None
            index[key] = len(ext_ids)
            ext_ids.append(key)
            cats.append(row[1].strip())
            brands.append(row[2].strip())
            embs.append(vec)

    dims = {len(v) for v in embs if v is not None}
    if len(dims) > 1:
        raise DataFormatError(items_path, 0, f"inconsistent embedding widths {sorted(dims)}")
    dim = dims.pop() if dims else d
    emb = np.array([v if v is not None else _hashed_embedding(k, dim) for k, v in zip(ext_ids, embs)]).reshape(-1, dim)

    def buckets(values):
        vocab = {v: i for i, v in enumerate(sorted(set(values)))}
        return np.array([vocab[v] for v in values], dtype=np.int64)

    catalog = Catalog(emb, {"category": buckets(cats), "brand": buckets(brands)}, ext_ids)

    rows: dict[str, list[tuple[float, int, int]]] = {}
    with open(interactions_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is not None and [h.strip() for h in header] != ["user_id", "item_id", "timestamp"]:
            raise DataFormatError(interactions_path, 1, "header must be user_id,item_id,timestamp")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise DataFormatError(interactions_path, lineno, f"expected 3 fields, got {len(row)}")
            user, key, ts = (c.strip() for c in row)
            if key not in index:
                raise DataFormatError(interactions_path, lineno, f"unknown item_id {key!r}")
            try:
                t = float(ts)
            except ValueError:
                raise DataFormatError(interactions_path, lineno, f"bad timestamp {ts!r}") from None
            rows.setdefault(user, []).append((t, lineno, index[key]))

    seqs = []
    dropped = 0
    for uid, user in enumerate(sorted(rows)):
        events = sorted(rows[user])  # timestamp, then file order
        if len(events) < 3:
            dropped += 1
            continue
        seqs.append(InteractionSequence(uid, [e[2] for e in events], [e[0] for e in events]))
    if dropped:
        log.info("dropped %d users with fewer than 3 interactions", dropped)
    return catalog, seqs, dropped


def leave_one_out(sequences: list[InteractionSequence], max_len: int = 20) -> SplitDataset:
    """Last item -> test, second-to-last -> validation, the rest -> train.

    The test-time history (train + validation) is capped at ``max_len`` items,
    so train keeps at most ``max_len - 1`` items.
    """
    users = []
    for s in sequences:
        if len(s.items) < 3:
            continue
        train = s.items[:-2][-(max_len - 1):] if max_len > 1 else []
        users.append(UserSplit(s.user_id, list(train), s.items[-2], s.items[-1]))
    return SplitDataset(users, max_len)


def training_pairs(split: SplitDataset) -> list[tuple[int, list[int], int]]:
    """Next-item pairs (user, history, target) over train + validation target."""
    pairs = []
    for u in split.users:
        seq = u.train + [u.valid]
        for t in range(1, len(seq)):
            pairs.append((u.user_id, seq[max(0, t - split.max_len):t], seq[t]))
    return pairs


def test_pairs(split: SplitDataset) -> list[tuple[int, list[int], int]]:
    return [(u.user_id, u.test_history[-split.max_len:], u.test) for u in split.users]


test_pairs.__test__ = False  # keep pytest from collecting it


def empirical_same_category_rate(catalog: Catalog, sequences: list[InteractionSequence]) -> float:
    cat = catalog.attributes["category"]
    same = total = 0
    for s in sequences:
        for a, b in zip(s.items, s.items[1:]):
            same += cat[a] == cat[b]
            total += 1
    return same / max(total, 1)


# --------------------------------------------------------------- persistence


def save_dataset(path, catalog: Catalog, sequences: list[InteractionSequence], header: dict | None = None) -> None:
    raw = {
        "header": header or {},
        "embeddings": catalog.embeddings.tolist(),
        "attributes": {k: v.tolist() for k, v in catalog.attributes.items()},
        "external_ids": catalog.external_ids,
        "sequences": [asdict(s) for s in sequences],
    }
    with open(path, "w") as fh:
        json.dump(raw, fh)


def load_dataset(path) -> tuple[Catalog, list[InteractionSequence]]:
    with open(path) as fh:
        raw = json.load(fh)
    catalog = Catalog(
        np.array(raw["embeddings"], dtype=np.float64),
        {k: np.array(v, dtype=np.int64) for k, v in raw["attributes"].items()},
        raw.get("external_ids"),
    )
    return catalog, [InteractionSequence(**s) for s in raw["sequences"]]
