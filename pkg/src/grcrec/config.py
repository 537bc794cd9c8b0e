"""Experiment configuration: one JSON file, sectioned, with ``--set section.key=value`` overrides."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .errors import ConfigError


@dataclass
class DatasetSection:
    source: str = "synthetic"  # or "csv"
    interactions: str = ""
    items: str = ""
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
    history_len: int = 20


@dataclass
class TokenizerSection:
    levels: int = 3
    codebook_size: int = 16
    iters: int = 25
    seed: int = 0


@dataclass
class ModelSection:
    d_model: int = 32
    d_ff: int = 64
    n_heads: int = 2
    enc_layers: int = 1
    dec_layers: int = 2


@dataclass
class PretrainSection:
    epochs: int = 8
    batch_size: int = 128
    lr: float = 1e-3
    grad_clip: float = 1.0


@dataclass
class SFTSection:
    lambda_rc: float = 1.2
    beam_size: int = 4
    max_correct: int = 1
    pairs_per_user: int = 2
    epochs: int = 3
    batch_size: int = 64
    lr: float = 1e-3
    grad_clip: float = 1.0
    draft_supervision: str = "ground_truth"


@dataclass
class RLSection:
    iterations: int = 80
    users_per_iter: int = 32
    group_size: int = 8
    lr: float = 5e-4
    inner_epochs: int = 2
    eps_clip: float = 0.15
    beta_kl: float = 0.03
    temperature: float = 1.0
    advantage_mode: str = "zscore"
    kl_guard: float = 5.0
    grad_clip: float = 1.0
    beta_cor: float = 2.2
    beta_last: float = 2.0
    beta_loc: float = 1.0
    beta_sem: float = 0.8
    loc_eps: float = 1e-6


@dataclass
class DecodeSection:
    beam_size: int = 20
    alpha: float = 0.2
    skip_rule: bool = True
    correction_width: int = 1
    pool_factor: int = 1
    user_chunk: int = 64
    variants: list = field(default_factory=lambda: ["one_pass", "grc_sft", "grc_rl"])


@dataclass
class EvalSection:
    ks: list = field(default_factory=lambda: [5, 10, 100, 200])


@dataclass
class ExperimentConfig:
    seed: int = 0
    run_root: str = "runs"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    tokenizer: TokenizerSection = field(default_factory=TokenizerSection)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    sft: SFTSection = field(default_factory=SFTSection)
    rl: RLSection = field(default_factory=RLSection)
    decode: DecodeSection = field(default_factory=DecodeSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """Digest of everything that affects results (``run_root`` excluded)."""
        raw = self.to_dict()
        raw.pop("run_root")
        blob = json.dumps(raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def section(self, name: str) -> dict:
        return asdict(getattr(self, name))


def _coerce(where: str, default, value):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return value
    return value


def _apply(obj, raw: dict, prefix: str = "") -> None:
    known = {f.name: f for f in fields(obj)}
    for key, value in raw.items():
        where = f"{prefix}{key}"
        if key not in known:
            raise ConfigError(f"unknown field {where!r}")
        current = getattr(obj, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected a section object")
            _apply(current, value, where + ".")
        else:
            setattr(obj, key, _coerce(where, current, value))


def from_dict(raw: dict) -> ExperimentConfig:
    cfg = ExperimentConfig()
    _apply(cfg, raw)
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    try:
        return from_dict(raw)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """``section.key=value`` pairs; values are parsed as JSON, else taken as strings."""
    raw = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        path, text = item.split("=", 1)
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node = raw
        keys = path.split(".")
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                raise ConfigError(f"unknown section {k!r} in override {item!r}")
            node = node[k]
        if keys[-1] not in node:
            raise ConfigError(f"unknown field {path!r}")
        node[keys[-1]] = value
    return from_dict(raw)


def validate(cfg: ExperimentConfig) -> None:
    checks = [
        (cfg.dataset.source in ("synthetic", "csv"), "dataset.source must be 'synthetic' or 'csv'"),
        (cfg.dataset.source != "csv" or (cfg.dataset.interactions and cfg.dataset.items),
         "dataset.interactions and dataset.items are required for csv input"),
        (cfg.dataset.history_len >= 2, "dataset.history_len must be >= 2"),
        (cfg.tokenizer.levels >= 1, "tokenizer.levels must be >= 1"),
        (cfg.tokenizer.codebook_size >= 2, "tokenizer.codebook_size must be >= 2"),
        (cfg.model.d_model % cfg.model.n_heads == 0, "model.d_model must be divisible by model.n_heads"),
        (cfg.sft.lambda_rc >= 0, "sft.lambda_rc must be >= 0"),
        (cfg.sft.beam_size >= 1, "sft.beam_size must be >= 1"),
        (cfg.sft.draft_supervision in ("ground_truth", "draft"), "sft.draft_supervision must be ground_truth or draft"),
        (cfg.rl.group_size >= 1, "rl.group_size must be >= 1"),
        (cfg.rl.advantage_mode in ("zscore", "rank"), "rl.advantage_mode must be zscore or rank"),
        (0 < cfg.rl.eps_clip < 1, "rl.eps_clip must be in (0, 1)"),
        (cfg.decode.beam_size >= 1, "decode.beam_size must be >= 1"),
        (set(cfg.decode.variants) <= {"one_pass", "grc_sft", "grc_rl"}, "decode.variants: unknown variant"),
        (all(isinstance(k, int) and k >= 1 for k in cfg.eval.ks), "eval.ks must be positive integers"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)
