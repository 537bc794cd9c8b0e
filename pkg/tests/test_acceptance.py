"""End-to-end acceptance checks; each test records one pass/fail line."""

import csv
import itertools
import json
import math
import subprocess
import sys
import time

import numpy as np
import pytest

from grcrec import autodiff as ad
from grcrec import decode as dec
from grcrec import rl
from grcrec.cli import bundled_config
from grcrec.config import load_config
from grcrec.data import Catalog, SyntheticConfig, generate_synthetic, leave_one_out
from grcrec.model import CORRECTION, DRAFT, REFLECTION, GRCModel, ModelConfig, PositionRole
from grcrec.sft import ReflectionLabel, SFTRecord, annotate_loc, batch_loss
from grcrec.tokenizer import Tokenizer, encode_batch

from conftest import make_model
from oracles import brute_force_reward, central_difference, first_divergence, rel_error

SEEDS = (0, 1, 2)


def lookup_for(model):
    table = {tuple(int(x) for x in row): i for i, row in enumerate(model.item_tokens)}
    return lambda toks: table.get(tuple(int(x) for x in toks))


def catalog_for(model):
    n = len(model.item_tokens)
    return Catalog(np.zeros((n, 2)), {"category": model.item_attrs[:, 0], "brand": model.item_attrs[:, 1]})


# ----------------------------------------------------------------------- 1


def test_reward_oracle_equivalence(criterion):
    t0 = time.perf_counter()
    model = make_model(vocab=(3, 3, 3), n_items=20, seed=8)
    cat, item_of = catalog_for(model), lookup_for(model)
    rng = np.random.default_rng(2024)
    L, mismatches = 3, 0
    seen = {"full": 0, "worse": 0, "invalid": 0}
    for n in range(1000):
        gt_item = int(rng.integers(20))
        gt = [int(x) for x in model.item_tokens[gt_item]]
        gt_item = item_of(gt)
        draft = gt if n % 5 == 0 else [int(x) for x in rng.integers(3, size=L)]
        corrected = [int(x) for x in rng.integers(3, size=L)] if n % 7 else [(g + 1) % 3 for g in gt]
        loc = L + 1 if n % 4 == 0 else int(rng.integers(1, L + 2))
        sem = [int(x) for x in rng.integers(2, size=2)]
        d_item, c_item = item_of(draft), item_of(corrected)
        got = rl.compute_reward(draft, (loc, *sem), corrected, gt, d_item, c_item, gt_item, cat)
        want = brute_force_reward(draft, corrected, gt, loc, sem, cat.attrs_of(d_item), cat.attrs_of(c_item),
                                  cat.attrs_of(gt_item))
        mismatches += any(getattr(got, k) != want[k] for k in rl.REWARD_FIELDS)
        seen["full"] += loc == L + 1
        seen["worse"] += got.l1 < got.l0
        seen["invalid"] += d_item is None or c_item is None
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and all(seen.values()) and elapsed < 10
    criterion(1, ok, f"{mismatches} mismatches over 1000 episodes, boundary cases {seen}, {elapsed:.2f}s")
    assert ok


# ----------------------------------------------------------------------- 2


def test_beam_exactness(criterion):
    t0 = time.perf_counter()
    model = make_model(vocab=(5, 5), n_items=10, seed=12)
    hist = [2, 7, 1]
    with ad.no_grad():
        enc = model.encode([hist])
        beams = dec.beam_search_draft(model, enc, 25)[0]
        first = ad.log_softmax(model.decode_step(enc, PositionRole(DRAFT, 0), draft=np.zeros((1, 0), int))).data[0]
        scored = []
        for a, b in itertools.product(range(5), range(5)):
            lp = ad.log_softmax(model.decode_step(enc, PositionRole(DRAFT, 1), draft=np.array([[a]]))).data[0]
            scored.append((first[a] + lp[b], (a, b)))
    ref = sorted(scored, key=lambda x: (-x[0], x[1]))
    elapsed = time.perf_counter() - t0
    same_order = [b.draft for b in beams] == [s for _, s in ref]
    gap = max(abs(b.base_score - s) for b, (s, _) in zip(beams, ref))
    ok = same_order and gap < 1e-12 and elapsed < 1
    criterion(2, ok, f"order identical={same_order}, max score gap {gap:.1e}, {elapsed:.2f}s")
    assert ok


# ----------------------------------------------------------------------- 3


def test_egrs_degeneracy(criterion):
    t0 = time.perf_counter()
    model = make_model(seed=4)
    item_of = lookup_for(model)
    hists = [[1, 2, 3], [4, 5], [6, 7, 8, 9]]
    plain = dec.one_pass_decode(model, item_of, hists, 12)
    grc = dec.grc_decode(model, item_of, hists, dec.DecodeSettings(beam_size=12, alpha=0.0, force_skip=True))
    identical = all(a.ranked == b.ranked for a, b in zip(plain, grc))
    lo = dec.Beam((0, 0, 1), -2.0, entropy=0.2)
    hi = dec.Beam((0, 0, 2), -2.0, entropy=0.9)
    prefers = dec.egrs_rank([lo, hi], 0.2)[0] is hi
    elapsed = time.perf_counter() - t0
    ok = identical and prefers and elapsed < 1
    criterion(3, ok, f"alpha=0 + forced skip equals one-pass={identical}, tie goes to higher entropy={prefers}, "
                     f"{elapsed:.2f}s")
    assert ok


# ----------------------------------------------------------------------- 4


def test_mask_isolation(criterion):
    t0 = time.perf_counter()
    model = make_model(seed=6)
    rng = np.random.default_rng(0)
    B = 6
    hist = [[int(x) for x in rng.integers(30, size=4)] for _ in range(B)]
    c = model.config
    draft = np.stack([rng.integers(v, size=B) for v in c.vocab_sizes], 1)
    refl = np.stack([rng.integers(v, size=B) for v in c.reflection_vocab], 1)
    corr = np.stack([rng.integers(v, size=B) for v in c.vocab_sizes], 1)
    with ad.no_grad():
        enc = model.encode(hist)
        base = model.forward_template(enc, draft, refl, corr)
        corr2 = corr[:, ::-1] % np.array(c.vocab_sizes)
        corr2 = np.where(corr2 == corr, (corr2 + 1) % np.array(c.vocab_sizes), corr2)
        out_a = model.forward_template(enc, draft, refl, corr2)
        refl2 = (refl + 1) % np.array(c.reflection_vocab)
        out_b = model.forward_template(enc, draft, refl2, corr2)
        worst_c = 0.0
        for j in range(len(c.reflection_vocab)):
            flipped = refl.copy()
            flipped[:, j] = (flipped[:, j] + 1) % c.reflection_vocab[j]
            out_c = model.forward_template(enc, draft, flipped, corr)
            for k in range(len(c.reflection_vocab)):
                if k != j:
                    worst_c = max(worst_c, np.abs(out_c[REFLECTION][k].data - base[REFLECTION][k].data).max())

    def gap(x, y, role):
        return max(np.abs(a.data - b.data).max() for a, b in zip(x[role], y[role]))

    ga, gb = gap(base, out_a, REFLECTION), gap(base, out_b, DRAFT)
    moved = gap(base, out_a, CORRECTION)  # sanity: the perturbation is visible downstream
    elapsed = time.perf_counter() - t0
    ok = ga < 1e-9 and gb < 1e-9 and worst_c < 1e-9 and moved > 1e-6 and elapsed < 5
    criterion(4, ok, f"(a) {ga:.1e} (b) {gb:.1e} (c) {worst_c:.1e}, correction moved {moved:.1e}, {elapsed:.2f}s")
    assert ok


# ----------------------------------------------------------------------- 5


def _op_graphs(rng):
    """Small graphs that together use every differentiable op."""
    idx = rng.integers(4, size=3)
    mask = np.where(np.tril(np.ones((4, 4))) > 0, 0.0, ad.MASK_VALUE)
    w = rng.normal(size=(3, 4))
    w44, w223 = ad.Tensor(rng.normal(size=(4, 4))), ad.Tensor(rng.normal(size=(2, 2, 3)))
    return [
        ([(3, 5), (5, 4), (3, 4)], lambda a, b, c: (ad.tanh(a @ b) * c).sum()),
        ([(3, 4), (3, 4), (3, 4)], lambda a, b, c: (ad.gelu(a) - ad.exp(b) / (c * c + 1.0)).mean()),
        ([(3, 4)], lambda a: -ad.take_last(ad.log_softmax(a), idx).sum()),
        ([(3, 4)], lambda a: ad.cross_entropy(a, idx)),
        ([(3, 4), (3, 4)], lambda a, b: -(ad.softmax(a) * b).sum()),
        ([(3, 4), (4,), (4,)], lambda a, g, b: (ad.layer_norm(a, g, b) * ad.Tensor(w)).sum()),
        ([(4, 4)], lambda a: (ad.softmax(ad.masked_fill(a, mask)) * w44).sum()),
        ([(2, 3), (2, 3)], lambda a, b: (ad.swap_last(ad.concat([a, b], axis=1).reshape(2, 2, 3).transpose(1, 0, 2))
                                        * ad.Tensor(w[:, :2].T.reshape(2, 3, 1))).sum()),
        ([(4, 5)], lambda a: (a[1:3] * a[0]).sum() + a[:, 2].mean()),
        ([(6, 3)], lambda W: (ad.embedding(W, np.array([[0, 2], [5, 2]])) * w223).sum()),
        ([(3, 4), (3, 4)], lambda a, b: (ad.clip(a, -0.5, 0.5) * b).sum() + ad.minimum(a, b).sum()),
        ([(3, 4)], lambda a: ad.log_(ad.exp(a) + 1.0).mean() + (-a).sum()),
        ([(2, 4, 3), (2, 4, 3), (2, 4, 3)],
         lambda q, k, v: (ad.softmax(ad.masked_fill(q @ ad.swap_last(k), mask)) @ v).sum()),
    ]


def _model_graph(seed):
    cfg = ModelConfig(vocab_sizes=[3, 4], n_attrs=1, attr_buckets=[2], d_model=8, d_ff=12, n_heads=2, seed=seed)
    rng = np.random.default_rng(seed)
    tokens = np.stack([rng.integers(3, size=8), rng.integers(4, size=8)], 1)
    model = GRCModel(cfg, tokens, rng.integers(2, size=(8, 1)))
    hist = [[int(x) for x in rng.integers(8, size=int(rng.integers(1, 4)))] for _ in range(2)]
    kind = seed % 3
    if kind == 0:
        fn = lambda: model.pretrain_loss(hist, tokens[[1, 5]])  # noqa: E731
    elif kind == 1:
        recs = [SFTRecord(0, h, 0, [int(rng.integers(3)), int(rng.integers(4))],
                          ReflectionLabel(int(rng.integers(1, 4)), (int(rng.integers(2)),)), [1, 2]) for h in hist]
        fn = lambda: batch_loss(model, recs, 1.2)  # noqa: E731
    else:
        eps = rl.rollout(model, hist, [1, 5], 1.0, np.random.default_rng(seed))
        for e in eps:
            e.logprobs = e.logprobs + rng.normal(scale=0.05, size=e.logprobs.shape)
        ref = model.clone()
        for p in ref.params.values():
            p.data = p.data + rng.normal(scale=0.1, size=p.data.shape)
        fn = lambda: rl.grpo_loss(model, eps, np.array([1.0, -0.5]), ref, beta_kl=0.03)[0]  # noqa: E731
    return model, fn


def test_gradient_fidelity(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(77)
    errors = []
    for shapes, fn in _op_graphs(rng):
        arrays = [rng.normal(size=s) for s in shapes]
        leaves = [ad.Tensor(a, requires_grad=True) for a in arrays]
        ad.reset_tape()
        ad.backward(fn(*leaves))

        def value():
            with ad.no_grad():
                return fn(*[ad.Tensor(a) for a in arrays]).item()

        num = central_difference(value, arrays)
        errors.append(max(rel_error(t.grad, n) for t, n in zip(leaves, num)))
    for seed in range(9):
        model, fn = _model_graph(seed)
        ad.reset_tape()
        model.zero_grad()
        ad.backward(fn())
        names = sorted(model.params)
        picks = [n for n in names if n.startswith("head.")] + list(rng.choice(names, size=10, replace=False))
        ana, num = [], []
        for name in picks:
            p = model.params[name]
            flat = p.data.reshape(-1)
            for i in rng.choice(flat.size, size=min(3, flat.size), replace=False):
                old = flat[i]
                with ad.no_grad():
                    flat[i] = old + 1e-5
                    up = fn().item()
                    flat[i] = old - 1e-5
                    down = fn().item()
                flat[i] = old
                ana.append(0.0 if p.grad is None else p.grad.reshape(-1)[i])
                num.append((up - down) / 2e-5)
        errors.append(rel_error(ana, num))
    elapsed = time.perf_counter() - t0
    worst = max(errors)
    ok = len(errors) >= 20 and worst < 1e-4 and elapsed < 30
    criterion(5, ok, f"{len(errors)} graphs, worst relative error {worst:.1e}, {elapsed:.2f}s")
    assert ok


# ----------------------------------------------------------------------- 6


def test_entropy_correctness(criterion):
    worst = 0.0
    for L, K in [(3, 2), (4, 2), (2, 5)]:
        uniform = [np.full((1, L + 1), -math.log(L + 1))] + [np.full((1, 2), -math.log(2))] * K
        want = (math.log(L + 1) + K * math.log(2)) / (K + 1)
        worst = max(worst, abs(dec.average_reflection_entropy(uniform)[0] - want))
    with np.errstate(divide="ignore"):
        one_hot = [np.log(np.eye(4)[[1]])] + [np.log(np.eye(2)[[0]])] * 2
    zero = dec.average_reflection_entropy(one_hot)[0]
    ok = worst < 1e-9 and zero == 0.0
    criterion(6, ok, f"uniform error {worst:.1e}, one-hot entropy {zero}")
    assert ok


# ----------------------------------------------------------------------- 7


def test_grpo_mechanics(criterion):
    rng = np.random.default_rng(5)
    worst_sum = max(abs(rl.group_advantage(rng.normal(size=int(rng.integers(2, 12))) * 5, mode).sum())
                    for _ in range(200) for mode in ("zscore", "rank"))
    model = make_model(seed=9)
    hists, targets = [[1, 2, 3]] * 4 + [[4, 5]] * 4, [3] * 4 + [7] * 4
    eps = rl.rollout(model, hists, targets, 1.0, np.random.default_rng(1))
    rl.score_episodes(eps, lookup_for(model), catalog_for(model), rl.RewardWeights())
    totals = np.array([e.reward.r_total for e in eps])
    adv = np.concatenate([rl.group_advantage(totals[:4]), rl.group_advantage(totals[4:])])
    if np.all(adv == 0):
        adv = np.tile([1.0, -1.0], 4)

    def grads(loss):
        model.zero_grad()
        ad.backward(loss)
        return {k: p.grad.copy() for k, p in model.params.items() if p.grad is not None}

    g1 = grads(rl.grpo_loss(model, eps, adv, None, beta_kl=0.0)[0])
    ad.reset_tape()
    g2 = grads(rl.policy_gradient_loss(model, eps, adv))
    grad_gap = max(np.abs(g1[k] - g2[k]).max() for k in g1)
    ref = model.clone()
    for p in ref.params.values():
        p.data = p.data + rng.normal(scale=0.05, size=p.data.shape)
    ad.reset_tape()
    _, stats = rl.grpo_loss(model, eps, adv, ref, beta_kl=0.03)
    ok = worst_sum < 1e-6 and grad_gap < 1e-6 and stats.kl >= 0 and g1.keys() == g2.keys()
    criterion(7, ok, f"max advantage sum {worst_sum:.1e}, on-policy gradient gap {grad_gap:.1e}, KL {stats.kl:.4f}")
    assert ok


# ----------------------------------------------------------------------- 8


def _run_all(root, seed):
    cmd = [sys.executable, "-m", "grcrec.cli", "run-all", "--run-root", str(root), "--seed", str(seed)]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr[-2000:]
    cfg = load_config(bundled_config())
    cfg.seed = seed
    return root / cfg.hash()


def _metric(run_dir, variant, name):
    with open(run_dir / "metrics.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            if row["variant"] == variant and row["metric"] == name:
                return float(row["value"])
    raise KeyError((variant, name))


@pytest.fixture(scope="session")
def smoke_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    runs = {}
    for seed in SEEDS:
        t0 = time.perf_counter()
        run_dir = _run_all(root, seed)
        runs[seed] = (run_dir, time.perf_counter() - t0)
    return runs


@pytest.mark.slow
def test_learning_effect(criterion, smoke_runs):
    nll, recall, rl_ends, minutes = [], [], [], []
    for seed in SEEDS:
        run_dir, wall = smoke_runs[seed]
        summary = json.loads((run_dir / "eval.json").read_text())["summary"]
        nll.append(summary["nll_ratio"])
        recall.append((_metric(run_dir, "grc_sft", "recall@10"), _metric(run_dir, "one_pass", "recall@10")))
        rl_ends.append((summary["rl_first_10pct"], summary["rl_last_10pct"]))
        minutes.append(wall / 60)
    ok_a = all(r < 0.8 for r in nll)
    wins = sum(g >= o for g, o in recall)
    ok_b = wins >= 2
    ok_c = all(last >= first for first, last in rl_ends)
    timing = "/".join(f"{m:.1f}" for m in minutes)
    criterion("8a", ok_a, "pretrain NLL / uniform NLL per seed " + ", ".join(f"{r:.3f}" for r in nll))
    criterion("8b", ok_b, f"GRC-SFT >= one-pass Recall@10 in {wins}/3 seeds; (grc_sft, one_pass) = "
                          + ", ".join(f"({g:.4f}, {o:.4f})" for g, o in recall))
    criterion("8c", ok_c, "RL mean R_total first vs last 10% " + ", ".join(f"{a:.2f}->{b:.2f}" for a, b in rl_ends)
                          + f"; minutes per seed {timing}")
    assert ok_a and ok_b and ok_c


# ----------------------------------------------------------------------- 9


def test_annotation_oracles(criterion):
    rng = np.random.default_rng(99)
    loc_bad = 0
    for _ in range(10_000):
        L = int(rng.integers(1, 6))
        gt = rng.integers(4, size=L).tolist()
        draft = [g if rng.random() < 0.7 else int(rng.integers(4)) for g in gt]
        loc_bad += annotate_loc(draft, gt) != first_divergence(draft, gt)
    cfg = load_config(bundled_config())
    catalog, seqs = generate_synthetic(SyntheticConfig(n_items=cfg.dataset.n_items, n_users=cfg.dataset.n_users))
    tok = Tokenizer.fit(catalog.embeddings, cfg.tokenizer.levels, cfg.tokenizer.codebook_size, seed=0)
    codes = encode_batch(catalog.embeddings, tok.codebooks)
    trip_bad = sum(
        tok.item_of(tok.tokens_of(i)) != i or tuple(codes[i]) != tok.semantic_ids[i].tokens for i in range(len(catalog))
    )
    split = leave_one_out(seqs, cfg.dataset.history_len)
    leak = 0
    for s, u in zip(seqs, split.users):
        T = cfg.dataset.history_len
        leak += (u.valid, u.test) != (s.items[-2], s.items[-1])
        leak += u.train != s.items[:-2][-(T - 1):]
        leak += len(u.test_history) > T
    ok = loc_bad == 0 and trip_bad == 0 and leak == 0 and len(split.users) == len(seqs)
    criterion(9, ok, f"annotate_loc mismatches {loc_bad}/10000, round-trip failures {trip_bad}/{len(catalog)}, "
                     f"split violations {leak}/{len(seqs)}")
    assert ok


# ---------------------------------------------------------------------- 10


@pytest.mark.slow
def test_determinism(criterion, smoke_runs, tmp_path):
    first, _ = smoke_runs[0]
    second = _run_all(tmp_path, 0)
    a, b = (first / "metrics.csv").read_bytes(), (second / "metrics.csv").read_bytes()
    others = [p.name for p in first.iterdir() if p.name != "timings.json"
              and p.read_bytes() != (second / p.name).read_bytes()]
    ok = a == b and not others
    criterion(10, ok, f"metric CSVs byte-identical={a == b}, other differing artifacts {others}")
    assert ok
