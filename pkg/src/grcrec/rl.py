"""GRPO over full generate -> reflect -> correct episodes with the decomposed reward."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Catalog
from .errors import ContractViolation
from .model import CORRECTION, DRAFT, REFLECTION, EncoderOutput, GRCModel, PositionRole
from .sft import annotate_loc

log = logging.getLogger(__name__)


@dataclass
class RewardWeights:
    beta_cor: float = 2.2
    beta_last: float = 2.0
    beta_loc: float = 1.0
    beta_sem: float = 0.8
    loc_eps: float = 1e-6


@dataclass
class RewardBreakdown:
    l0: int
    l1: int
    r_task: float
    r_loc_label: float
    r_loc_cor: float
    r_loc: float
    r_sem_label: float
    r_sem_cor: float
    r_sem: float
    r_delta: float
    r_cor: float
    r_total: float


REWARD_FIELDS = [f.name for f in fields(RewardBreakdown)]


def reward_task(draft, corrected, gt, beta_last: float = 2.0) -> tuple[int, int, float]:
    if not len(draft) == len(corrected) == len(gt):
        raise ContractViolation("draft, correction and target must have equal length")
    l0 = sum(int(a == b) for a, b in zip(draft, gt))
    l1 = sum(int(a == b) for a, b in zip(corrected, gt))
    return l0, l1, l0 + beta_last * l1


def reward_loc(loc_pred: int, loc_gt: int, draft, corrected, gt, eps: float = 1e-6) -> tuple[float, float, float]:
    """Localisation accuracy plus the fraction of the flagged region that the correction fixed."""
    L = len(gt)
    label = 1.0 if loc_pred == loc_gt else 0.0
    region = range(loc_pred, L + 1)
    fixed = sum(1 for t in region if draft[t - 1] != gt[t - 1] and corrected[t - 1] == gt[t - 1])
    cor = fixed / (len(region) + eps)
    return label, cor, label + cor


def reward_sem(sem_pred, sem_gt, draft_attrs, corr_attrs, gt_attrs) -> tuple[float, float, float]:
    """Attribute-flag accuracy plus credit for attributes flagged wrong and then repaired.

    ``*_attrs`` are attribute-bucket tuples, or None for a code no item owns.
    """
    K = len(sem_pred)
    if K < 1:
        raise ContractViolation("need at least one attribute")

    def match(attrs, k):
        return attrs is not None and attrs[k] == gt_attrs[k]

    label = sum(int(sem_pred[k] == sem_gt[k]) for k in range(K)) / K
    cor = sum(int(sem_pred[k] == 0 and not match(draft_attrs, k) and match(corr_attrs, k)) for k in range(K)) / K
    return label, cor, label + cor


def reward_delta(l0: int, l1: int) -> float:
    return float(l1 - l0) if l1 > l0 else 0.0


def compute_reward(draft, reflection, corrected, gt, draft_item, corr_item, gt_item, catalog: Catalog,
                   w: RewardWeights | None = None) -> RewardBreakdown:
    """``reflection`` = (r_loc in 1..L+1, sem flags...)."""
    w = w or RewardWeights()
    l0, l1, r_task = reward_task(draft, corrected, gt, w.beta_last)
    loc_gt = annotate_loc(draft, gt)
    loc_label, loc_cor, r_loc = reward_loc(reflection[0], loc_gt, draft, corrected, gt, w.loc_eps)
    d_attrs, c_attrs, g_attrs = catalog.attrs_of(draft_item), catalog.attrs_of(corr_item), catalog.attrs_of(gt_item)
    sem_gt = [int(d_attrs is not None and d_attrs[k] == g_attrs[k]) for k in range(len(g_attrs))]
    sem_label, sem_cor, r_sem = reward_sem(reflection[1:], sem_gt, d_attrs, c_attrs, g_attrs)
    r_delta = reward_delta(l0, l1)
    r_cor = w.beta_loc * r_loc + w.beta_sem * r_sem + r_delta
    return RewardBreakdown(l0, l1, r_task, loc_label, loc_cor, r_loc, sem_label, sem_cor, r_sem, r_delta, r_cor,
                           r_task + w.beta_cor * r_cor)


def group_advantage(rewards, mode: str = "zscore") -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if len(r) < 2:
        log.warning("group of size %d has no relative advantage", len(r))
        return np.zeros_like(r)
    if mode == "zscore":
        return (r - r.mean()) / (r.std() + 1e-8)
    if mode == "rank":
        order = np.argsort(r, kind="stable")
        ranks = np.empty(len(r))
        ranks[order] = np.arange(len(r), dtype=np.float64)
        for v in np.unique(r):  # ties share their average rank
            tied = r == v
            ranks[tied] = ranks[tied].mean()
        half = (len(r) - 1) / 2
        return (ranks - half) / half
    raise ValueError(f"unknown advantage mode {mode!r}")


@dataclass
class Episode:
    user: int
    history: list[int]
    target: int
    gt: tuple[int, ...]
    draft: tuple[int, ...]
    reflection: tuple[int, ...]  # (r_loc in 1..L+1, sem bits...)
    corrected: tuple[int, ...]
    logprobs: np.ndarray  # (2L + K + 1,) draft, reflection, correction tokens
    reward: RewardBreakdown | None = None

    def tokens(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        refl = np.array(self.reflection)
        refl[0] -= 1
        return np.array(self.draft), refl, np.array(self.corrected)


def _sample(lp: np.ndarray, temperature: float, rng: np.random.Generator) -> np.ndarray:
    if temperature <= 1e-8:
        return lp.argmax(axis=1)
    z = lp / temperature
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    u = rng.random(len(p))[:, None]
    idx = (np.cumsum(p, axis=1) < u).sum(axis=1)
    return np.minimum(idx, p.shape[1] - 1)


def rollout(model: GRCModel, histories: list[list[int]], targets: list[int], temperature: float,
            rng: np.random.Generator, users: list[int] | None = None) -> list[Episode]:
    """Sample one episode per (history, target) row.  Recorded log-probs are the untempered policy's."""
    n = len(histories)
    L = model.config.levels
    with ad.no_grad():
        enc = model.encode(histories)
        draft = np.zeros((n, 0), dtype=np.int64)
        lps = []
        for t in range(L):
            lp = ad.log_softmax(model.decode_step(enc, PositionRole(DRAFT, t), draft=draft)).data
            tok = _sample(lp, temperature, rng)
            lps.append(lp[np.arange(n), tok])
            draft = np.concatenate([draft, tok[:, None]], axis=1)
        refl = []
        for lp in model.reflection_logprobs(enc, draft):
            tok = _sample(lp.data, temperature, rng)
            lps.append(lp.data[np.arange(n), tok])
            refl.append(tok)
        refl = np.stack(refl, axis=1)
        corr = np.zeros((n, 0), dtype=np.int64)
        for t in range(L):
            lp = ad.log_softmax(
                model.decode_step(enc, PositionRole(CORRECTION, t), draft=draft, reflection=refl, correction=corr)
            ).data
            tok = _sample(lp, temperature, rng)
            lps.append(lp[np.arange(n), tok])
            corr = np.concatenate([corr, tok[:, None]], axis=1)
    lps = np.stack(lps, axis=1)
    users = users if users is not None else list(range(n))
    return [
        Episode(users[i], list(histories[i]), int(targets[i]), tuple(int(x) for x in model.item_tokens[targets[i]]),
                tuple(int(x) for x in draft[i]), (int(refl[i, 0]) + 1, *(int(x) for x in refl[i, 1:])),
                tuple(int(x) for x in corr[i]), lps[i])
        for i in range(n)
    ]


def score_episodes(episodes: list[Episode], item_of, catalog: Catalog, w: RewardWeights) -> None:
    for e in episodes:
        e.reward = compute_reward(e.draft, e.reflection, e.corrected, e.gt, item_of(e.draft), item_of(e.corrected),
                                  e.target, catalog, w)


def _episode_outputs(model: GRCModel, episodes: list[Episode], enc: EncoderOutput | None = None) -> list[Tensor]:
    """Per-position log-prob distributions, ordered draft, reflection, correction."""
    draft = np.array([e.tokens()[0] for e in episodes])
    refl = np.array([e.tokens()[1] for e in episodes])
    corr = np.array([e.tokens()[2] for e in episodes])
    if enc is None:
        enc = model.encode([e.history for e in episodes])
    out = model.forward_template(enc, draft, refl, corr)
    return out[DRAFT] + out[REFLECTION] + out[CORRECTION]


def _sampled_tokens(episodes: list[Episode]) -> np.ndarray:
    return np.array([np.concatenate(e.tokens()) for e in episodes])


def token_logprobs(model: GRCModel, episodes: list[Episode]) -> np.ndarray:
    """Re-score sampled tokens under ``model`` (teacher-forced, one pass)."""
    with ad.no_grad():
        dists = _episode_outputs(model, episodes)
    toks = _sampled_tokens(episodes)
    return np.stack([d.data[np.arange(len(episodes)), toks[:, p]] for p, d in enumerate(dists)], axis=1)


@dataclass
class GRPOStats:
    loss: float
    surrogate: float
    kl: float
    dropped: int
    clipped_fraction: float


def grpo_loss(model: GRCModel, episodes: list[Episode], advantages, ref_model: GRCModel | None,
              eps_clip: float = 0.15, beta_kl: float = 0.03) -> tuple[Tensor, GRPOStats]:
    """Per-token clipped surrogate (old policy = recorded log-probs) plus exact KL to the reference."""
    adv = np.asarray(advantages, dtype=np.float64)
    toks = _sampled_tokens(episodes)
    old = np.stack([e.logprobs for e in episodes])
    dists = _episode_outputs(model, episodes)
    cur = np.stack([d.data[np.arange(len(episodes)), toks[:, p]] for p, d in enumerate(dists)], axis=1)
    with np.errstate(over="ignore", invalid="ignore"):
        ok = np.all(np.isfinite(np.exp(cur - old)), axis=1)
    dropped = int((~ok).sum())
    if dropped:
        log.warning("dropping %d episodes with non-finite probability ratios", dropped)
    keep = np.flatnonzero(ok)
    T = toks.shape[1]
    tok_lp = ad.concat(
        [ad.take_last(d[keep], toks[keep, p]).reshape(len(keep), 1) for p, d in enumerate(dists)], axis=1
    )
    ratio = ad.exp(tok_lp - Tensor(old[keep]))
    A = Tensor(adv[keep][:, None])
    surr = ad.minimum(ratio * A, ad.clip(ratio, 1 - eps_clip, 1 + eps_clip) * A)
    surrogate = surr.mean()
    loss = -surrogate
    kl_val = 0.0
    if ref_model is not None and beta_kl != 0:
        with ad.no_grad():
            ref = _episode_outputs(ref_model, [episodes[i] for i in keep])
        kl = None
        for d, r in zip(dists, ref):
            dk = d[keep]
            term = (ad.exp(dk) * (dk - Tensor(r.data))).sum()
            kl = term if kl is None else kl + term
        kl = kl * (1.0 / (len(keep) * T))
        kl_val = kl.item()
        loss = loss + kl * beta_kl
    elif ref_model is not None:
        with ad.no_grad():
            ref = _episode_outputs(ref_model, [episodes[i] for i in keep])
        kl_val = float(
            np.mean([(np.exp(d.data[keep]) * (d.data[keep] - r.data)).sum(axis=1).mean() for d, r in zip(dists, ref)])
        )
    r = ratio.data
    clipped = float(np.mean((r < 1 - eps_clip) | (r > 1 + eps_clip)))
    return loss, GRPOStats(loss.item(), surrogate.item(), kl_val, dropped, clipped)


def policy_gradient_loss(model: GRCModel, episodes: list[Episode], advantages) -> Tensor:
    """Vanilla REINFORCE surrogate -mean(A * log pi(token)); reference for on-policy checks."""
    adv = np.asarray(advantages, dtype=np.float64)
    toks = _sampled_tokens(episodes)
    dists = _episode_outputs(model, episodes)
    tok_lp = ad.concat([ad.take_last(d, toks[:, p]).reshape(len(episodes), 1) for p, d in enumerate(dists)], axis=1)
    return -(tok_lp * Tensor(adv[:, None])).mean()


@dataclass
class RLConfig:
    iterations: int = 40
    users_per_iter: int = 16
    group_size: int = 8
    lr: float = 1e-4
    inner_epochs: int = 2
    eps_clip: float = 0.15
    beta_kl: float = 0.03
    temperature: float = 1.0
    advantage_mode: str = "zscore"
    kl_guard: float = 5.0
    grad_clip: float = 1.0
    seed: int = 0
    weights: RewardWeights = field(default_factory=RewardWeights)

    def to_dict(self) -> dict:
        return asdict(self)


def train_rl(model: GRCModel, ref_model: GRCModel, pairs: list[tuple[int, list[int], int]], item_of,
             catalog: Catalog, cfg: RLConfig) -> list[dict]:
    """Optimise ``model`` in place; returns one curve row per iteration."""
    rng = np.random.default_rng(cfg.seed)
    opt = ad.Adam(model.params, lr=cfg.lr)
    curves = []
    for it in range(cfg.iterations):
        pick = rng.choice(len(pairs), size=min(cfg.users_per_iter, len(pairs)), replace=False)
        chosen = [pairs[i] for i in sorted(pick)]
        rows = [p for p in chosen for _ in range(cfg.group_size)]
        episodes = rollout(model, [p[1] for p in rows], [p[2] for p in rows], cfg.temperature, rng,
                           users=[p[0] for p in rows])
        score_episodes(episodes, item_of, catalog, cfg.weights)
        totals = np.array([e.reward.r_total for e in episodes])
        adv = np.concatenate([
            group_advantage(totals[g * cfg.group_size:(g + 1) * cfg.group_size], cfg.advantage_mode)
            for g in range(len(chosen))
        ])
        stats = None
        for _ in range(cfg.inner_epochs):
            ad.reset_tape()
            model.zero_grad()
            loss, stats = grpo_loss(model, episodes, adv, ref_model, cfg.eps_clip, cfg.beta_kl)
            ad.backward(loss)
            opt.clip_grad_norm(cfg.grad_clip)
            opt.step()
        if stats.kl > cfg.kl_guard:
            opt.state.lr /= 2
            log.warning("iteration %d: mean KL %.3f > %.3f, halving lr to %g", it, stats.kl, cfg.kl_guard, opt.state.lr)
        row = {"iteration": it}
        for name in REWARD_FIELDS:
            vals = np.array([getattr(e.reward, name) for e in episodes], dtype=np.float64)
            row[f"{name}_mean"] = float(vals.mean())
            row[f"{name}_std"] = float(vals.std())
        row["kl"] = stats.kl
        row["clipped_fraction"] = stats.clipped_fraction
        row["dropped"] = stats.dropped
        curves.append(row)
        log.info("rl iter %d: R_total %.3f R_task %.3f R_cor %.3f KL %.4f", it, row["r_total_mean"],
                 row["r_task_mean"], row["r_cor_mean"], stats.kl)
    return curves


def write_curves(path, curves: list[dict]) -> None:
    cols = list(curves[0]) if curves else ["iteration"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in curves:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def smoothed_ends(values, frac: float = 0.1) -> tuple[float, float]:
    """Means over the first and last ``frac`` of a curve (at least one point each)."""
    v = np.asarray(values, dtype=np.float64)
    k = max(1, int(round(len(v) * frac)))
    return float(v[:k].mean()), float(v[-k:].mean())
