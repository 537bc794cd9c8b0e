"""Beam-search drafts, parallel reflection, entropy-calibrated pruning and correction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .model import CORRECTION, DRAFT, EncoderOutput, GRCModel, PositionRole

log = logging.getLogger(__name__)

PENDING, SKIPPED, CORRECTED = "pending", "skipped-correct", "corrected"


@dataclass
class Beam:
    draft: tuple[int, ...]
    base_score: float
    reflection: tuple[int, ...] = ()  # (r_loc in 1..L+1, sem bits...)
    entropy: float = 0.0
    egrs_score: float = 0.0
    status: str = PENDING
    final: tuple[int, ...] = ()
    item: int | None = None
    steps: int = 0  # correction decode steps spent on this beam
    user: int = 0  # row of the encoder batch this beam belongs to

    def diagnostics(self) -> dict:
        return {
            "draft": list(self.draft),
            "base_score": self.base_score,
            "reflection": list(self.reflection),
            "entropy": self.entropy,
            "egrs_score": self.egrs_score,
            "status": self.status,
            "final": list(self.final),
            "item": self.item,
            "steps": self.steps,
        }


@dataclass
class DecodeResult:
    ranked: list[tuple[int, float]]
    beams: list[Beam] = field(default_factory=list)
    skipped: int = 0
    corrected: int = 0
    invalid: int = 0
    correction_steps: int = 0

    @property
    def items(self) -> list[int]:
        return [i for i, _ in self.ranked]


def _topk_rows(scores: np.ndarray, seqs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k best candidates: score desc, then lexicographic token order."""
    keys = [seqs[:, i] for i in range(seqs.shape[1] - 1, -1, -1)] + [-scores]
    return np.lexsort(keys)[:k]


def beam_search_draft(model: GRCModel, enc: EncoderOutput, B: int, chunk: int = 4096) -> list[list[Beam]]:
    """Standard beam search over the L draft levels, per encoder row."""
    if B < 1:
        raise ValueError("beam size must be >= 1")
    U = len(enc)
    L = model.config.levels
    seqs = [np.zeros((1, 0), dtype=np.int64) for _ in range(U)]
    scores = [np.zeros(1) for _ in range(U)]
    for t in range(L):
        rows = np.concatenate([np.full(len(s), u) for u, s in enumerate(seqs)])
        prefix = np.concatenate(seqs, axis=0)
        with ad.no_grad():
            lp = np.concatenate(
                [
                    ad.log_softmax(
                        model.decode_step(enc.select(rows[i:i + chunk]), PositionRole(DRAFT, t), draft=prefix[i:i + chunk])
                    ).data
                    for i in range(0, len(rows), chunk)
                ]
            )
        V = lp.shape[1]
        start = 0
        for u in range(U):
            n = len(seqs[u])
            cand_scores = (scores[u][:, None] + lp[start:start + n]).reshape(-1)
            cand_seqs = np.concatenate(
                [np.repeat(seqs[u], V, axis=0), np.tile(np.arange(V), n)[:, None]], axis=1
            )
            keep = _topk_rows(cand_scores, cand_seqs, B)
            seqs[u], scores[u] = cand_seqs[keep], cand_scores[keep]
            start += n
    if len(seqs[0]) < B:
        log.warning("only %d complete sequences exist; returning fewer than B=%d beams", len(seqs[0]), B)
    return [
        [Beam(tuple(int(x) for x in s), float(sc), user=u) for s, sc in zip(seqs[u], scores[u])] for u in range(U)
    ]


def slot_entropy(logprobs: np.ndarray) -> np.ndarray:
    """Natural-log entropy of each row of a log-prob matrix."""
    p = np.exp(logprobs)
    with np.errstate(invalid="ignore"):
        return -np.where(p > 0, p * logprobs, 0.0).sum(axis=-1)


def average_reflection_entropy(slot_logprobs: list[np.ndarray]) -> np.ndarray:
    return sum(slot_entropy(lp) for lp in slot_logprobs) / len(slot_logprobs)


def reflect(model: GRCModel, enc: EncoderOutput, beams: list[Beam], chunk: int = 4096) -> None:
    """Greedy reflection tokens and mean slot entropy for each beam, in place."""
    if not beams:
        return
    for i in range(0, len(beams), chunk):
        part = beams[i:i + chunk]
        draft = np.array([b.draft for b in part])
        with ad.no_grad():
            lps = [lp.data for lp in model.reflection_logprobs(enc.select([b.user for b in part]), draft)]
        ent = average_reflection_entropy(lps)
        tokens = np.stack([lp.argmax(axis=1) for lp in lps], axis=1)
        for b, tok, h in zip(part, tokens, ent):
            b.reflection = (int(tok[0]) + 1, *(int(x) for x in tok[1:]))
            b.entropy = float(h)


def egrs_rank(beams: list[Beam], alpha: float, budget: int | None = None) -> list[Beam]:
    """Re-score with base + alpha * entropy and keep the top ``budget``."""
    for b in beams:
        b.egrs_score = b.base_score + alpha * b.entropy
    order = sorted(beams, key=lambda b: (-b.egrs_score, -b.base_score, b.draft))
    return order if budget is None else order[:budget]


def apply_skip_rule(beam: Beam, levels: int, force: bool = False) -> str:
    if force or beam.reflection[0] == levels + 1:
        beam.status = SKIPPED
        beam.final = beam.draft
    else:
        beam.status = PENDING
    return beam.status


def correct_pass(model: GRCModel, enc: EncoderOutput, beams: list[Beam], width: int = 1, chunk: int = 4096) -> int:
    """Decode the correction segment for every pending beam; returns decode steps used.

    ``width`` > 1 runs a small beam search inside each correction and keeps its best hypothesis.
    """
    pending = [b for b in beams if b.status == PENDING]
    if not pending:
        return 0
    L = model.config.levels
    steps = 0
    n = len(pending)
    users = np.array([b.user for b in pending])
    draft = np.array([b.draft for b in pending])
    refl = np.array([b.reflection for b in pending])
    refl[:, 0] -= 1  # localisation value -> class index
    # hypotheses: owner beam index, tokens, score
    owner = np.arange(n)
    toks = np.zeros((n, 0), dtype=np.int64)
    score = np.zeros(n)
    per_beam = np.zeros(n, dtype=np.int64)
    for t in range(L):
        steps += len(owner)
        np.add.at(per_beam, owner, 1)
        with ad.no_grad():
            lp = np.concatenate(
                [
                    ad.log_softmax(
                        model.decode_step(
                            enc.select(users[owner[i:i + chunk]]),
                            PositionRole(CORRECTION, t),
                            draft=draft[owner[i:i + chunk]],
                            reflection=refl[owner[i:i + chunk]],
                            correction=toks[i:i + chunk],
                        )
                    ).data
                    for i in range(0, len(owner), chunk)
                ]
            )
        if width == 1:
            best = lp.argmax(axis=1)
            toks = np.concatenate([toks, best[:, None]], axis=1)
            score = score + lp[np.arange(len(best)), best]
            continue
        V = lp.shape[1]
        new_owner, new_toks, new_score = [], [], []
        for o in range(n):
            rows = np.flatnonzero(owner == o)
            cs = (score[rows][:, None] + lp[rows]).reshape(-1)
            cq = np.concatenate([np.repeat(toks[rows], V, axis=0), np.tile(np.arange(V), len(rows))[:, None]], axis=1)
            keep = _topk_rows(cs, cq, width)
            new_owner.append(np.full(len(keep), o))
            new_toks.append(cq[keep])
            new_score.append(cs[keep])
        owner, toks, score = np.concatenate(new_owner), np.concatenate(new_toks), np.concatenate(new_score)
    for o, b in enumerate(pending):
        rows = np.flatnonzero(owner == o)
        best = rows[_topk_rows(score[rows], toks[rows], 1)[0]]
        b.final = tuple(int(x) for x in toks[best])
        b.status = CORRECTED
        b.steps = int(per_beam[o])
    return steps


def finalize(beams: list[Beam], item_of, budget: int | None = None) -> DecodeResult:
    """Map finals through the lookup, drop invalid codes, dedupe by best egrs score."""
    result = DecodeResult([], beams)
    seen: dict[int, float] = {}
    for b in sorted(beams, key=lambda b: (-b.egrs_score, -b.base_score, b.draft)):
        b.item = item_of(b.final)
        result.correction_steps += b.steps
        if b.status == SKIPPED:
            result.skipped += 1
        elif b.status == CORRECTED:
            result.corrected += 1
        if b.item is None:
            result.invalid += 1
            continue
        if b.item not in seen:
            seen[b.item] = b.egrs_score
            result.ranked.append((b.item, b.egrs_score))
    if budget is not None:
        result.ranked = result.ranked[:budget]
    if not result.ranked:
        log.debug("all %d beams decoded to invalid codes", len(beams))
    return result


@dataclass
class DecodeSettings:
    beam_size: int = 20
    alpha: float = 0.2
    skip_rule: bool = True
    force_skip: bool = False
    correction_width: int = 1
    pool_factor: int = 1  # draft beams per kept beam before EGRS pruning
    user_chunk: int = 64


def grc_decode(model: GRCModel, item_of, histories: list[list[int]], settings: DecodeSettings) -> list[DecodeResult]:
    """Full generate -> reflect -> prune -> skip/correct -> finalize for each history."""
    out = []
    B = settings.beam_size
    L = model.config.levels
    for s in range(0, len(histories), settings.user_chunk):
        with ad.no_grad():
            enc = model.encode(histories[s:s + settings.user_chunk])
            per_user = beam_search_draft(model, enc, B * settings.pool_factor)
            flat = [b for beams in per_user for b in beams]
            reflect(model, enc, flat)
            kept = []
            for beams in per_user:
                kept.append(egrs_rank(beams, settings.alpha, B))
            flat = [b for beams in kept for b in beams]
            for b in flat:
                if settings.skip_rule or settings.force_skip:
                    apply_skip_rule(b, L, force=settings.force_skip)
            correct_pass(model, enc, flat, settings.correction_width)
        out.extend(finalize(beams, item_of, B) for beams in kept)
    return out


def one_pass_decode(model: GRCModel, item_of, histories: list[list[int]], beam_size: int, user_chunk: int = 64) -> list[DecodeResult]:
    """Plain backbone decoding: beam search, map through the lookup, rank by base score."""
    out = []
    for s in range(0, len(histories), user_chunk):
        with ad.no_grad():
            enc = model.encode(histories[s:s + user_chunk])
            per_user = beam_search_draft(model, enc, beam_size)
        for beams in per_user:
            for b in beams:
                b.final = b.draft
                b.status = SKIPPED
                b.egrs_score = b.base_score
            out.append(finalize(beams, item_of, beam_size))
    return out
