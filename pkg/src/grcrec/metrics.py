"""Retrieval metrics (Recall@K, NDCG@K) and reflection-quality metrics (Acc_loc@K, Acc_cat@K)."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_KS = (5, 10, 100, 200)


def _rank(ranked, target) -> int | None:
    """1-based rank of ``target`` or None."""
    for r, item in enumerate(ranked, start=1):
        if item == target:
            return r
    return None


def _check_k(k: int) -> None:
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")


def recall_at_k(ranked, target, k: int) -> float:
    _check_k(k)
    r = _rank(ranked[:k], target)
    return 1.0 if r is not None else 0.0


def ndcg_at_k(ranked, target, k: int) -> float:
    """Single relevant item, so the ideal DCG is 1."""
    _check_k(k)
    r = _rank(ranked[:k], target)
    return 0.0 if r is None else 1.0 / math.log2(r + 1)


def _per_draft_accuracy(pred, gold, k: int) -> tuple[float, bool]:
    """Mean agreement over the first ``k`` drafts; flag is True when fewer than k exist."""
    _check_k(k)
    n = min(k, len(pred))
    if n == 0:
        return 0.0, True
    hits = sum(int(p == g) for p, g in zip(pred[:n], gold[:n]))
    return hits / n, n < k


def acc_loc_at_k(pred_locs, gt_locs, k: int) -> tuple[float, bool]:
    """Localisation accuracy over one user's top-k first-pass drafts."""
    return _per_draft_accuracy(pred_locs, gt_locs, k)


def acc_cat_at_k(pred_flags, gt_flags, k: int) -> tuple[float, bool]:
    """Category-consistency flag accuracy over one user's top-k first-pass drafts."""
    return _per_draft_accuracy(pred_flags, gt_flags, k)


def macro_average(values) -> float:
    return float(np.mean(values)) if len(values) else 0.0


@dataclass
class UserRow:
    user: int
    target: int
    rank: int | None
    n_ranked: int
    acc_loc: dict[int, float] = field(default_factory=dict)
    acc_cat: dict[int, float] = field(default_factory=dict)
    short: bool = False  # fewer first-pass drafts than the largest K


@dataclass
class EvalReport:
    metrics: dict[str, float]
    rows: list[UserRow]
    meta: dict

    def to_json(self) -> dict:
        return {
            "meta": self.meta,
            "metrics": self.metrics,
            "users": [
                {"user": r.user, "target": r.target, "rank": r.rank, "n_ranked": r.n_ranked,
                 "acc_loc": r.acc_loc, "acc_cat": r.acc_cat, "short": r.short}
                for r in self.rows
            ],
        }

    def save(self, json_path, csv_path) -> None:
        with open(json_path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            for name in sorted(self.metrics):
                w.writerow([name, repr(self.metrics[name])])


def evaluate(ranked_lists, targets, users=None, ks=DEFAULT_KS, reflections=None, meta: dict | None = None) -> EvalReport:
    """Aggregate per-user metrics.

    ``reflections`` (optional) is one entry per user: a list of
    (pred_loc, gt_loc, pred_cat_flag, gt_cat_flag) tuples for the first-pass
    drafts in base-score order.  Acc metrics are macro-averaged over users.
    """
    users = users if users is not None else list(range(len(targets)))
    ks = sorted(set(int(k) for k in ks))
    for k in ks:
        _check_k(k)
    rows = []
    metrics: dict[str, list[float]] = {}
    for i, (ranked, target) in enumerate(zip(ranked_lists, targets)):
        row = UserRow(int(users[i]), int(target), _rank(ranked, target), len(ranked))
        for k in ks:
            metrics.setdefault(f"recall@{k}", []).append(recall_at_k(ranked, target, k))
            metrics.setdefault(f"ndcg@{k}", []).append(ndcg_at_k(ranked, target, k))
        if reflections is not None:
            refl = reflections[i]
            for k in ks:
                loc, short = acc_loc_at_k([x[0] for x in refl], [x[1] for x in refl], k)
                cat, _ = acc_cat_at_k([x[2] for x in refl], [x[3] for x in refl], k)
                row.acc_loc[k], row.acc_cat[k] = loc, cat
                row.short = row.short or short
                metrics.setdefault(f"acc_loc@{k}", []).append(loc)
                metrics.setdefault(f"acc_cat@{k}", []).append(cat)
        rows.append(row)
    info = {"n_users": len(rows), "ks": ks, "acc_averaging": "macro", "ndcg_ideal_dcg": 1.0}
    info.update(meta or {})
    if reflections is not None:
        info["users_with_fewer_drafts_than_k"] = sum(r.short for r in rows)
    return EvalReport({name: macro_average(v) for name, v in metrics.items()}, rows, info)
