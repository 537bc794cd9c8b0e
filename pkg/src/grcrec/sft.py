"""Reflection labels, three-segment supervision templates and the SFT objective."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Catalog
from .decode import beam_search_draft
from .errors import ContractViolation
from .model import CORRECTION, DRAFT, REFLECTION, GRCModel, TemplateLayout

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReflectionLabel:
    loc: int  # 1..L+1, L+1 = draft fully correct
    sem: tuple[int, ...]
    invalid: bool = False  # draft code owned by no item

    def tokens(self) -> tuple[int, ...]:
        return (self.loc, *self.sem)

    def class_indices(self) -> tuple[int, ...]:
        """Model-side targets: localisation shifted to 0..L."""
        return (self.loc - 1, *self.sem)


def annotate_loc(draft, gt) -> int:
    """First 1-based position where the draft departs from the target, or L+1."""
    if len(draft) != len(gt):
        raise ContractViolation(f"draft length {len(draft)} != target length {len(gt)}")
    for t, (a, b) in enumerate(zip(draft, gt), start=1):
        if a != b:
            return t
    return len(gt) + 1


def annotate_sem(draft_item: int | None, gt_item: int, catalog: Catalog) -> tuple[tuple[int, ...], bool]:
    """Per-attribute agreement flags; an unresolvable draft gets all zeros and the invalid marker."""
    gt_attrs = catalog.attrs_of(gt_item)
    if draft_item is None:
        return (0,) * len(gt_attrs), True
    return tuple(int(a == b) for a, b in zip(catalog.attrs_of(draft_item), gt_attrs)), False


def annotate(draft, gt, draft_item, gt_item, catalog: Catalog) -> ReflectionLabel:
    sem, invalid = annotate_sem(draft_item, gt_item, catalog)
    return ReflectionLabel(annotate_loc(draft, gt), sem, invalid)


@dataclass
class SFTRecord:
    """One serialized template: the draft, its labels and the correction target."""

    user: int
    history: list[int]
    target_item: int
    draft: list[int]
    label: ReflectionLabel
    gt: list[int]

    def template(self, layout: TemplateLayout) -> list:
        return layout.serialize(self.draft, list(self.label.tokens()), self.gt)

    def to_json(self) -> dict:
        raw = asdict(self)
        raw["label"] = {"loc": self.label.loc, "sem": list(self.label.sem), "invalid": self.label.invalid}
        return raw

    @classmethod
    def from_json(cls, raw: dict) -> "SFTRecord":
        lab = raw["label"]
        return cls(raw["user"], raw["history"], raw["target_item"], raw["draft"],
                   ReflectionLabel(lab["loc"], tuple(lab["sem"]), lab["invalid"]), raw["gt"])


def make_sft_corpus(model: GRCModel, item_of, catalog: Catalog, pairs: list[tuple[int, list[int], int]],
                    beam_size: int = 4, max_correct: int = 1, chunk: int = 256) -> tuple[list[SFTRecord], int]:
    """Annotate ``beam_size`` beam drafts per (user, history, target) pair.

    At most ``max_correct`` fully-correct drafts are kept per pair.  Returns
    (records, number of pairs skipped because beam search produced nothing).
    """
    records: list[SFTRecord] = []
    skipped = 0
    for s in range(0, len(pairs), chunk):
        part = pairs[s:s + chunk]
        with ad.no_grad():
            enc = model.encode([h for _, h, _ in part])
            beams = beam_search_draft(model, enc, beam_size)
        for (user, history, target), user_beams in zip(part, beams):
            if not user_beams:
                skipped += 1
                continue
            gt = [int(x) for x in model.item_tokens[target]]
            n_correct = 0
            for b in user_beams:
                label = annotate(b.draft, gt, item_of(b.draft), target, catalog)
                if label.loc == len(gt) + 1:
                    n_correct += 1
                    if n_correct > max_correct:
                        continue
                records.append(SFTRecord(user, list(history), int(target), list(b.draft), label, gt))
    if skipped:
        log.info("skipped %d pairs with empty beams", skipped)
    return records, skipped


def save_corpus(path, records: list[SFTRecord], header: dict | None = None) -> None:
    """JSON lines; an optional first line ``{"header": ...}``."""
    with open(path, "w") as fh:
        if header is not None:
            fh.write(json.dumps({"header": header}) + "\n")
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")


def load_corpus(path) -> list[SFTRecord]:
    with open(path) as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    return [SFTRecord.from_json(r) for r in rows if "header" not in r]


def _nll(lp: Tensor, targets: np.ndarray) -> Tensor:
    """Summed negative log-likelihood over the batch."""
    return -ad.take_last(lp, targets).sum()


def sft_loss(outputs: dict[str, list[Tensor]], draft_targets, reflection_targets, correction_targets,
             lambda_rc: float = 1.2) -> Tensor:
    """Draft NLL + lambda_rc * (reflection NLL + correction NLL), summed over positions, mean over the batch.

    Delimiter positions carry no loss (they have no outputs).  ``reflection_targets``
    are class indices (localisation already shifted to 0..L).
    """
    draft_targets = np.asarray(draft_targets)
    reflection_targets = np.asarray(reflection_targets)
    correction_targets = np.asarray(correction_targets)
    B = draft_targets.shape[0]
    mle = sum((_nll(lp, draft_targets[:, t]) for t, lp in enumerate(outputs[DRAFT])), Tensor(0.0))
    rc = sum((_nll(lp, reflection_targets[:, j]) for j, lp in enumerate(outputs[REFLECTION])), Tensor(0.0))
    rc = rc + sum((_nll(lp, correction_targets[:, t]) for t, lp in enumerate(outputs[CORRECTION])), Tensor(0.0))
    return (mle + rc * lambda_rc) * (1.0 / B)


def batch_loss(model: GRCModel, records: list[SFTRecord], lambda_rc: float = 1.2,
               draft_supervision: str = "ground_truth") -> Tensor:
    """SFT loss on a batch of records; ``draft_supervision`` picks the draft-segment target."""
    draft = np.array([r.draft for r in records])
    gt = np.array([r.gt for r in records])
    refl = np.array([r.label.class_indices() for r in records])
    if draft_supervision == "ground_truth":
        draft_targets = gt
    elif draft_supervision == "draft":
        draft_targets = draft
    else:
        raise ValueError(f"unknown draft_supervision {draft_supervision!r}")
    out = model.forward_template(model.encode([r.history for r in records]), draft, refl, gt)
    return sft_loss(out, draft_targets, refl, gt, lambda_rc)
