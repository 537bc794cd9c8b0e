"""Minibatch loops for backbone pretraining and template fine-tuning."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .model import GRCModel
from .sft import SFTRecord, batch_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 1e-3
    grad_clip: float = 1.0
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def uniform_nll(vocab_sizes) -> float:
    """Per-token NLL of uniform logits, averaged over levels."""
    return float(np.mean([math.log(v) for v in vocab_sizes]))


def evaluate_nll(model: GRCModel, pairs, batch_size: int = 512) -> float:
    """Mean per-token NLL of ``(user, history, target)`` pairs under teacher forcing."""
    total, n = 0.0, 0
    with ad.no_grad():
        for s in range(0, len(pairs), batch_size):
            part = pairs[s:s + batch_size]
            loss = model.pretrain_loss([p[1] for p in part], model.item_tokens[[p[2] for p in part]])
            total += loss.item() * len(part)
            n += len(part)
    return total / max(n, 1)


def _step(model: GRCModel, opt: ad.Adam, loss: ad.Tensor, grad_clip: float) -> None:
    ad.backward(loss)
    opt.clip_grad_norm(grad_clip)
    opt.step()
    model.zero_grad()


def pretrain(model: GRCModel, pairs, cfg: TrainConfig, valid_pairs=None) -> list[dict]:
    """Next-item MLE over (user, history, target) pairs; returns one curve row per epoch."""
    rng = np.random.default_rng(cfg.seed)
    opt = ad.Adam(model.params, lr=cfg.lr)
    curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        losses = []
        for s in range(0, len(order), cfg.batch_size):
            part = [pairs[i] for i in order[s:s + cfg.batch_size]]
            ad.reset_tape()
            loss = model.pretrain_loss([p[1] for p in part], model.item_tokens[[p[2] for p in part]])
            losses.append(loss.item())
            _step(model, opt, loss, cfg.grad_clip)
        row = {"epoch": epoch, "train_nll": float(np.mean(losses))}
        if valid_pairs:
            row["valid_nll"] = evaluate_nll(model, valid_pairs)
        curve.append(row)
        log.info("pretrain epoch %d: %s", epoch, row)
    return curve


def finetune(model: GRCModel, records: list[SFTRecord], cfg: TrainConfig, lambda_rc: float = 1.2,
             draft_supervision: str = "ground_truth") -> list[dict]:
    """Template SFT; the reported loss is per record."""
    rng = np.random.default_rng(cfg.seed)
    opt = ad.Adam(model.params, lr=cfg.lr)
    curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(records))
        losses = []
        for s in range(0, len(order), cfg.batch_size):
            part = [records[i] for i in order[s:s + cfg.batch_size]]
            ad.reset_tape()
            loss = batch_loss(model, part, lambda_rc, draft_supervision)
            losses.append(loss.item())
            _step(model, opt, loss, cfg.grad_clip)
        curve.append({"epoch": epoch, "sft_loss": float(np.mean(losses))})
        log.info("sft epoch %d: loss %.4f", epoch, curve[-1]["sft_loss"])
    return curve
