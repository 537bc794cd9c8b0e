"""Stage runners: each reads upstream artifacts from the run directory and writes its own plus a manifest."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import decode as dec
from . import rl as rlmod
from .config import ExperimentConfig
from .data import (
    ATTRIBUTES,
    SyntheticConfig,
    empirical_same_category_rate,
    generate_synthetic,
    ingest_csv,
    leave_one_out,
    load_dataset,
    save_dataset,
    test_pairs,
    training_pairs,
)
from .errors import ConfigError, MissingArtifact
from .metrics import evaluate
from .model import GRCModel, ModelConfig
from .sft import annotate_loc, annotate_sem, load_corpus, make_sft_corpus, save_corpus
from .tokenizer import Tokenizer
from .training import TrainConfig, finetune, pretrain, uniform_nll

log = logging.getLogger(__name__)

STAGES = ["gen-data", "tokenize", "pretrain", "build-sft-corpus", "sft", "rl", "decode", "eval"]

# stage -> (inputs, outputs); names are relative to the run directory
ARTIFACTS = {
    "gen-data": ([], ["dataset.json"]),
    "tokenize": (["dataset.json"], ["tokenizer.json"]),
    "pretrain": (["dataset.json", "tokenizer.json"], ["pretrain.ckpt.json", "pretrain_curve.csv"]),
    "build-sft-corpus": (["dataset.json", "tokenizer.json", "pretrain.ckpt.json"], ["sft_corpus.jsonl"]),
    "sft": (["tokenizer.json", "pretrain.ckpt.json", "sft_corpus.jsonl"], ["sft.ckpt.json", "sft_curve.csv"]),
    "rl": (["dataset.json", "tokenizer.json", "sft.ckpt.json"], ["rl.ckpt.json", "rl_curves.csv"]),
    "decode": (["dataset.json", "tokenizer.json"], ["decode.jsonl"]),
    "eval": (["dataset.json", "tokenizer.json", "decode.jsonl"], ["metrics.csv", "eval.json"]),
}
PRODUCER = {out: stage for stage, (_, outs) in ARTIFACTS.items() for out in outs}
VARIANT_CKPT = {"one_pass": "pretrain.ckpt.json", "grc_sft": "sft.ckpt.json", "grc_rl": "rl.ckpt.json"}
CONFIG_SECTIONS = {
    "gen-data": ["dataset"],
    "tokenize": ["tokenizer"],
    "pretrain": ["model", "pretrain"],
    "build-sft-corpus": ["sft"],
    "sft": ["sft"],
    "rl": ["rl"],
    "decode": ["decode"],
    "eval": ["eval"],
}


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def derive_seed(seed: int, name: str) -> int:
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


def stage_inputs(stage: str, cfg: ExperimentConfig) -> list[str]:
    inputs = list(ARTIFACTS[stage][0])
    if stage == "decode":
        inputs += [VARIANT_CKPT[v] for v in cfg.decode.variants]
    if stage == "eval":
        inputs += ["pretrain_curve.csv"] + (["rl_curves.csv"] if "grc_rl" in cfg.decode.variants else [])
    return inputs


@dataclass
class Context:
    cfg: ExperimentConfig
    run_dir: Path
    force: bool = False

    @property
    def config_hash(self) -> str:
        return self.cfg.hash()

    def path(self, name: str) -> Path:
        return self.run_dir / name

    def header(self, stage: str) -> dict:
        return {
            "config_hash": self.config_hash,
            "stage": stage,
            "seed": self.cfg.seed,
            "config": {s: self.cfg.section(s) for s in CONFIG_SECTIONS[stage]},
            "version": __version__,
        }


def prepare_run_dir(cfg: ExperimentConfig, run_dir=None, force: bool = False) -> Context:
    """Create (or reopen) the run directory; refuse a directory made by a different config."""
    path = Path(run_dir) if run_dir else Path(cfg.run_root) / cfg.hash()
    path.mkdir(parents=True, exist_ok=True)
    cfg_file = path / "config.json"
    if cfg_file.exists():
        old = json.loads(cfg_file.read_text())
        if old.get("config_hash") != cfg.hash() and not force:
            raise ConfigError(
                f"{path} was created by config {old.get('config_hash')}, not {cfg.hash()}; use --force to overwrite"
            )
    body = {"config_hash": cfg.hash(), "config": cfg.to_dict()}
    body["config"].pop("run_root")
    cfg_file.write_text(json.dumps(body, indent=1, sort_keys=True) + "\n")
    return Context(cfg, path, force)


def _manifest_path(ctx: Context, stage: str) -> Path:
    return ctx.path(f"{stage}.manifest.json")


def check_inputs(ctx: Context, stage: str) -> dict[str, str]:
    """Hash every input; missing files name the producing subcommand, altered files are refused."""
    hashes = {}
    for name in stage_inputs(stage, ctx.cfg):
        p = ctx.path(name)
        producer = PRODUCER[name]
        if not p.exists():
            raise MissingArtifact(p, producer)
        hashes[name] = file_hash(p)
        mp = _manifest_path(ctx, producer)
        if mp.exists():
            recorded = json.loads(mp.read_text())["outputs"].get(name)
            if recorded and recorded != hashes[name] and not ctx.force:
                raise ConfigError(f"{p} does not match the hash recorded by `{producer}`; rerun it or pass --force")
    return hashes


def is_current(ctx: Context, stage: str) -> bool:
    """True when the stage's manifest matches the present inputs and outputs."""
    mp = _manifest_path(ctx, stage)
    if not mp.exists():
        return False
    man = json.loads(mp.read_text())
    if man.get("config_hash") != ctx.config_hash:
        return False
    try:
        inputs = {n: file_hash(ctx.path(n)) for n in stage_inputs(stage, ctx.cfg)}
        outputs = {n: file_hash(ctx.path(n)) for n in man["outputs"]}
    except FileNotFoundError:
        return False
    if inputs != man["inputs"] or outputs != man["outputs"]:
        if not ctx.force:
            raise ConfigError(f"artifacts of `{stage}` changed since its manifest was written; pass --force to rebuild")
        return False
    return True


def run_stage(ctx: Context, stage: str) -> None:
    if stage not in RUNNERS:
        raise ConfigError(f"unknown stage {stage!r}")
    inputs = check_inputs(ctx, stage)
    t0 = time.perf_counter()
    log.info("stage %s -> %s", stage, ctx.run_dir)
    RUNNERS[stage](ctx)
    wall = time.perf_counter() - t0
    outputs = {n: file_hash(ctx.path(n)) for n in ARTIFACTS[stage][1]}
    manifest = {**ctx.header(stage), "inputs": inputs, "outputs": outputs}
    _manifest_path(ctx, stage).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    # wall time lives outside the manifest so manifests stay reproducible
    tp = ctx.path("timings.json")
    timings = json.loads(tp.read_text()) if tp.exists() else {}
    timings[stage] = round(wall, 3)
    tp.write_text(json.dumps(timings, indent=1) + "\n")
    log.info("stage %s done in %.1fs", stage, wall)


def run_all(ctx: Context) -> None:
    for stage in STAGES:
        if stage == "rl" and "grc_rl" not in ctx.cfg.decode.variants:
            continue
        if is_current(ctx, stage):
            log.info("stage %s is up to date", stage)
            continue
        run_stage(ctx, stage)


# ------------------------------------------------------------------ loaders


def _load_data(ctx: Context):
    catalog, seqs = load_dataset(ctx.path("dataset.json"))
    return catalog, seqs, leave_one_out(seqs, ctx.cfg.dataset.history_len)


def _attrs(catalog) -> np.ndarray:
    return np.stack([catalog.attributes[a] for a in ATTRIBUTES], axis=1)


def _load_model(ctx: Context, name: str, tok: Tokenizer, catalog) -> GRCModel:
    return GRCModel.load(ctx.path(name), tok.item_tokens, _attrs(catalog))[0]


def _write_rows(path, rows: list[dict], config_hash: str) -> None:
    cols = list(rows[0]) + ["config_hash"] if rows else ["config_hash"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({**{k: repr(v) if isinstance(v, float) else v for k, v in r.items()}, "config_hash": config_hash})


def _read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ------------------------------------------------------------------ stages


def stage_gen_data(ctx: Context) -> None:
    d = ctx.cfg.dataset
    if d.source == "csv":
        catalog, seqs, dropped = ingest_csv(d.interactions, d.items, d.d)
        extra = {"dropped_users": dropped}
    else:
        syn = SyntheticConfig(d.n_items, d.n_users, d.n_categories, d.n_brands, d.d, d.min_len, d.max_len,
                              d.n_successors, d.p_successor, d.p_same_category, derive_seed(ctx.cfg.seed, "data"))
        catalog, seqs = generate_synthetic(syn)
        extra = {"same_category_rate": empirical_same_category_rate(catalog, seqs)}
    save_dataset(ctx.path("dataset.json"), catalog, seqs, {**ctx.header("gen-data"), **extra})


def stage_tokenize(ctx: Context) -> None:
    catalog, _ = load_dataset(ctx.path("dataset.json"))
    t = ctx.cfg.tokenizer
    tok = Tokenizer.fit(catalog.embeddings, t.levels, t.codebook_size,
                        derive_seed(ctx.cfg.seed, f"tokenizer{t.seed}"), iters=t.iters)
    log.info("tokenizer: vocab sizes %s, suffix size %d", tok.vocab_sizes, tok.suffix_size)
    tok.save(ctx.path("tokenizer.json"), ctx.header("tokenize"))


def stage_pretrain(ctx: Context) -> None:
    catalog, _, split = _load_data(ctx)
    tok = Tokenizer.load(ctx.path("tokenizer.json"))
    m = ctx.cfg.model
    mc = ModelConfig(tok.vocab_sizes, n_attrs=len(ATTRIBUTES),
                     attr_buckets=[int(catalog.attributes[a].max()) + 1 for a in ATTRIBUTES],
                     d_model=m.d_model, d_ff=m.d_ff, n_heads=m.n_heads, enc_layers=m.enc_layers,
                     dec_layers=m.dec_layers, max_history=ctx.cfg.dataset.history_len,
                     seed=derive_seed(ctx.cfg.seed, "model"))
    model = GRCModel(mc, tok.item_tokens, _attrs(catalog))
    p = ctx.cfg.pretrain
    pairs = training_pairs(split)
    # held-out check: the validation item predicted from the training history
    valid = [(u.user_id, u.train[-split.max_len:], u.valid) for u in split.users if u.train]
    curve = pretrain(model, pairs, TrainConfig(p.epochs, p.batch_size, p.lr, p.grad_clip,
                                               derive_seed(ctx.cfg.seed, "pretrain")), valid)
    uniform = uniform_nll(tok.vocab_sizes)
    for row in curve:
        row["uniform_nll"] = uniform
    model.save(ctx.path("pretrain.ckpt.json"), ctx.header("pretrain"))
    _write_rows(ctx.path("pretrain_curve.csv"), curve, ctx.config_hash)


def _sft_pairs(split, per_user: int):
    by_user: dict[int, list] = {}
    for p in training_pairs(split):
        by_user.setdefault(p[0], []).append(p)
    return [q for u in sorted(by_user) for q in by_user[u][-per_user:]]


def stage_build_sft_corpus(ctx: Context) -> None:
    catalog, _, split = _load_data(ctx)
    tok = Tokenizer.load(ctx.path("tokenizer.json"))
    model = _load_model(ctx, "pretrain.ckpt.json", tok, catalog)
    s = ctx.cfg.sft
    pairs = _sft_pairs(split, s.pairs_per_user)
    records, skipped = make_sft_corpus(model, tok.item_of, catalog, pairs, s.beam_size, s.max_correct)
    locs = np.bincount([r.label.loc for r in records], minlength=tok.levels + 2)[1:].tolist()
    save_corpus(ctx.path("sft_corpus.jsonl"), records,
                {**ctx.header("build-sft-corpus"), "pairs": len(pairs), "skipped": skipped, "loc_counts": locs})


def stage_sft(ctx: Context) -> None:
    tok = Tokenizer.load(ctx.path("tokenizer.json"))
    catalog, _ = load_dataset(ctx.path("dataset.json"))
    model = _load_model(ctx, "pretrain.ckpt.json", tok, catalog)
    records = load_corpus(ctx.path("sft_corpus.jsonl"))
    s = ctx.cfg.sft
    curve = finetune(model, records, TrainConfig(s.epochs, s.batch_size, s.lr, s.grad_clip,
                                                 derive_seed(ctx.cfg.seed, "sft")), s.lambda_rc, s.draft_supervision)
    model.save(ctx.path("sft.ckpt.json"), ctx.header("sft"))
    _write_rows(ctx.path("sft_curve.csv"), curve, ctx.config_hash)


def rl_config(ctx: Context) -> rlmod.RLConfig:
    r = ctx.cfg.rl
    w = rlmod.RewardWeights(r.beta_cor, r.beta_last, r.beta_loc, r.beta_sem, r.loc_eps)
    return rlmod.RLConfig(r.iterations, r.users_per_iter, r.group_size, r.lr, r.inner_epochs, r.eps_clip, r.beta_kl,
                          r.temperature, r.advantage_mode, r.kl_guard, r.grad_clip, derive_seed(ctx.cfg.seed, "rl"), w)


def stage_rl(ctx: Context) -> None:
    catalog, _, split = _load_data(ctx)
    tok = Tokenizer.load(ctx.path("tokenizer.json"))
    model = _load_model(ctx, "sft.ckpt.json", tok, catalog)
    ref = model.clone()
    by_user: dict[int, tuple] = {}
    for p in training_pairs(split):
        by_user[p[0]] = p  # last pair per user: the validation target
    pairs = [by_user[u] for u in sorted(by_user)]
    cfg = rl_config(ctx)
    curves = rlmod.train_rl(model, ref, pairs, tok.item_of, catalog, cfg)
    model.save(ctx.path("rl.ckpt.json"), {**ctx.header("rl"), "rl_config": cfg.to_dict()})
    _write_rows(ctx.path("rl_curves.csv"), curves, ctx.config_hash)


def decode_settings(ctx: Context) -> dec.DecodeSettings:
    d = ctx.cfg.decode
    return dec.DecodeSettings(d.beam_size, d.alpha, d.skip_rule, False, d.correction_width, d.pool_factor, d.user_chunk)


def stage_decode(ctx: Context) -> None:
    catalog, _, split = _load_data(ctx)
    tok = Tokenizer.load(ctx.path("tokenizer.json"))
    pairs = test_pairs(split)
    histories = [p[1] for p in pairs]
    settings = decode_settings(ctx)
    with open(ctx.path("decode.jsonl"), "w") as fh:
        fh.write(json.dumps({"header": ctx.header("decode")}) + "\n")
        for variant in ctx.cfg.decode.variants:
            model = _load_model(ctx, VARIANT_CKPT[variant], tok, catalog)
            if variant == "one_pass":
                results = dec.one_pass_decode(model, tok.item_of, histories, settings.beam_size, settings.user_chunk)
            else:
                results = dec.grc_decode(model, tok.item_of, histories, settings)
            for (user, _, _), res in zip(pairs, results):
                fh.write(json.dumps({
                    "variant": variant,
                    "user": user,
                    "ranked": [[i, s] for i, s in res.ranked],
                    "skipped": res.skipped,
                    "corrected": res.corrected,
                    "invalid": res.invalid,
                    "correction_steps": res.correction_steps,
                    "beams": [b.diagnostics() for b in res.beams],
                }) + "\n")
            log.info("decoded %s for %d users", variant, len(results))


def read_decode(path) -> tuple[dict, dict[str, list[dict]]]:
    out: dict[str, list[dict]] = {}
    header = {}
    with open(path) as fh:
        for line in fh:
            row = json.loads(line)
            if "header" in row:
                header = row["header"]
                continue
            out.setdefault(row["variant"], []).append(row)
    return header, out


def stage_eval(ctx: Context) -> None:
    catalog, _, split = _load_data(ctx)
    tok = Tokenizer.load(ctx.path("tokenizer.json"))
    _, decoded = read_decode(ctx.path("decode.jsonl"))
    target_of = {u.user_id: u.test for u in split.users}
    reports = {}
    rows = []
    for variant, recs in decoded.items():
        targets = [target_of[r["user"]] for r in recs]
        reflections = None
        if variant != "one_pass":
            reflections = []
            for r, t in zip(recs, targets):
                gt = tok.tokens_of(t)
                beams = sorted(r["beams"], key=lambda b: (-b["base_score"], b["draft"]))  # first-pass order
                entry = []
                for b in beams:
                    flags, _ = annotate_sem(tok.item_of(b["draft"]), t, catalog)
                    entry.append((b["reflection"][0], annotate_loc(b["draft"], gt), b["reflection"][1], flags[0]))
                reflections.append(entry)
        rep = evaluate([[i for i, _ in r["ranked"]] for r in recs], targets, [r["user"] for r in recs],
                       ctx.cfg.eval.ks, reflections,
                       {"variant": variant, "config_hash": ctx.config_hash,
                        "skipped": sum(r["skipped"] for r in recs), "corrected": sum(r["corrected"] for r in recs),
                        "invalid": sum(r["invalid"] for r in recs),
                        "correction_steps": sum(r["correction_steps"] for r in recs),
                        "mean_list_length": float(np.mean([len(r["ranked"]) for r in recs]))})
        reports[variant] = rep.to_json()
        for name in sorted(rep.metrics):
            rows.append({"variant": variant, "metric": name, "value": rep.metrics[name]})
    summary = {"config_hash": ctx.config_hash}
    curve = _read_rows(ctx.path("pretrain_curve.csv"))
    if curve and "valid_nll" in curve[-1]:
        summary["pretrain_valid_nll"] = float(curve[-1]["valid_nll"])
        summary["uniform_nll"] = float(curve[-1]["uniform_nll"])
        summary["nll_ratio"] = summary["pretrain_valid_nll"] / summary["uniform_nll"]
    if ctx.path("rl_curves.csv").exists() and "grc_rl" in decoded:
        totals = [float(r["r_total_mean"]) for r in _read_rows(ctx.path("rl_curves.csv"))]
        if totals:
            summary["rl_first_10pct"], summary["rl_last_10pct"] = rlmod.smoothed_ends(totals)
    with open(ctx.path("eval.json"), "w") as fh:
        json.dump({"summary": summary, "reports": reports}, fh, indent=1, sort_keys=True)
    _write_rows(ctx.path("metrics.csv"), rows, ctx.config_hash)


RUNNERS = {
    "gen-data": stage_gen_data,
    "tokenize": stage_tokenize,
    "pretrain": stage_pretrain,
    "build-sft-corpus": stage_build_sft_corpus,
    "sft": stage_sft,
    "rl": stage_rl,
    "decode": stage_decode,
    "eval": stage_eval,
}
