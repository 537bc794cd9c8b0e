import itertools
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grcrec import autodiff as ad
from grcrec import decode as dec
from grcrec.model import CORRECTION, DRAFT, PositionRole
from grcrec.sft import ReflectionLabel, SFTRecord, batch_loss

from conftest import make_model


def lookup_for(model):
    table = {tuple(int(x) for x in row): i for i, row in enumerate(model.item_tokens)}
    return lambda toks: table.get(tuple(int(x) for x in toks))


def exhaustive_ranking(model, hist):
    """Score every complete sequence independently and sort by log-prob, then tokens."""
    L = model.config.levels
    seqs = list(itertools.product(*[range(v) for v in model.config.vocab_sizes]))
    scored = []
    with ad.no_grad():
        enc = model.encode([hist])
        for s in seqs:
            total = 0.0
            for t in range(L):
                prefix = np.array([s[:t]], dtype=np.int64).reshape(1, t)
                lp = ad.log_softmax(model.decode_step(enc, PositionRole(DRAFT, t), draft=prefix)).data[0]
                total += lp[s[t]]
            scored.append((total, s))
    return sorted(scored, key=lambda x: (-x[0], x[1]))


def test_beam_search_equals_exhaustive_enumeration():
    model = make_model(vocab=(5, 5), n_items=10, seed=3)
    hist = [1, 4, 2]
    with ad.no_grad():
        beams = dec.beam_search_draft(model, model.encode([hist]), 25)[0]
    ref = exhaustive_ranking(model, hist)
    assert [b.draft for b in beams] == [s for _, s in ref]
    assert np.allclose([b.base_score for b in beams], [sc for sc, _ in ref], atol=1e-12)


def test_beam_one_is_greedy_and_scores_sorted(tiny_model):
    with ad.no_grad():
        enc = tiny_model.encode([[1, 2], [3]])
    prefix = np.zeros((1, 0), dtype=np.int64)
    with ad.no_grad():
        for t in range(3):
            lp = ad.log_softmax(tiny_model.decode_step(enc.select([0]), PositionRole(DRAFT, t), draft=prefix)).data
            prefix = np.concatenate([prefix, lp.argmax(1)[:, None]], 1)
    assert dec.beam_search_draft(tiny_model, enc, 1)[0][0].draft == tuple(prefix[0])
    for beams in dec.beam_search_draft(tiny_model, enc, 7):
        scores = [b.base_score for b in beams]
        assert scores == sorted(scores, reverse=True)


def test_beam_larger_than_space_warns(caplog):
    model = make_model(vocab=(2, 3), n_items=4)
    with caplog.at_level(logging.WARNING):
        beams = dec.beam_search_draft(model, model.encode([[0]]), 50)[0]
    assert len(beams) == 6
    assert "fewer than" in caplog.text
    with pytest.raises(ValueError):
        dec.beam_search_draft(model, model.encode([[0]]), 0)


def test_uniform_and_one_hot_entropy():
    L, K = 4, 2
    uniform = [np.full((1, L + 1), -math.log(L + 1))] + [np.full((1, 2), -math.log(2))] * K
    expected = (math.log(L + 1) + K * math.log(2)) / (K + 1)
    assert abs(dec.average_reflection_entropy(uniform)[0] - expected) < 1e-9
    assert abs(expected - (math.log(5) + 2 * math.log(2)) / 3) < 1e-15
    with np.errstate(divide="ignore"):
        one_hot = [np.log(np.eye(L + 1)[[2]])] + [np.log(np.eye(2)[[1]])] * K
    assert dec.average_reflection_entropy(one_hot)[0] == 0.0


def test_reflection_entropy_bounds(tiny_model):
    with ad.no_grad():
        enc = tiny_model.encode([[1, 2, 3]])
    beams = dec.beam_search_draft(tiny_model, enc, 10)[0]
    dec.reflect(tiny_model, enc, beams)
    cap = np.mean([math.log(v) for v in tiny_model.config.reflection_vocab])
    for b in beams:
        assert 0 <= b.entropy <= cap + 1e-12
        assert 1 <= b.reflection[0] <= tiny_model.config.levels + 1
        assert all(x in (0, 1) for x in b.reflection[1:])


def test_egrs_alpha_zero_keeps_base_order():
    rng = np.random.default_rng(0)
    beams = [dec.Beam((i,), float(s), entropy=float(h)) for i, (s, h) in enumerate(zip(rng.normal(size=12), rng.random(12)))]
    by_base = sorted(beams, key=lambda b: -b.base_score)
    assert [b.draft for b in dec.egrs_rank(list(beams), 0.0)] == [b.draft for b in by_base]


def test_egrs_prefers_uncertain_beam_on_ties():
    a = dec.Beam((0, 1), -1.0, entropy=0.1)
    b = dec.Beam((0, 2), -1.0, entropy=0.7)
    assert dec.egrs_rank([a, b], 0.2)[0] is b
    assert abs(b.egrs_score - (-1.0 + 0.2 * 0.7)) < 1e-15
    assert dec.egrs_rank([a, b], 0.0)[0] is a  # falls back to token order


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-20, 0), st.floats(0, 3)), min_size=1, max_size=30),
       st.floats(0, 2), st.integers(1, 30))
def test_egrs_pruning_is_monotone(pairs, alpha, budget):
    beams = [dec.Beam((i,), s, entropy=h) for i, (s, h) in enumerate(pairs)]
    kept = dec.egrs_rank(beams, alpha, budget)
    dropped = [b for b in beams if b not in kept]
    assert len(kept) == min(budget, len(beams))
    if kept and dropped:
        assert min(b.egrs_score for b in kept) >= max(b.egrs_score for b in dropped)


def test_skip_rule_statuses():
    b = dec.Beam((1, 2, 3), -1.0, reflection=(4, 1, 1))
    assert dec.apply_skip_rule(b, 3) == dec.SKIPPED and b.final == b.draft
    c = dec.Beam((1, 2, 3), -1.0, reflection=(1, 0, 1))
    assert dec.apply_skip_rule(c, 3) == dec.PENDING
    assert dec.apply_skip_rule(c, 3, force=True) == dec.SKIPPED


def test_correction_step_budget(tiny_model):
    with ad.no_grad():
        enc = tiny_model.encode([[1, 2, 3], [4]])
    beams = [b for bs in dec.beam_search_draft(tiny_model, enc, 6) for b in bs]
    dec.reflect(tiny_model, enc, beams)
    for i, b in enumerate(beams):
        b.reflection = (4 if i % 3 == 0 else 2, *b.reflection[1:])
        dec.apply_skip_rule(b, 3)
    pending = [b for b in beams if b.status == dec.PENDING]
    steps = dec.correct_pass(tiny_model, enc, beams)
    assert steps == 3 * len(pending)
    assert all(b.steps == 0 and b.final == b.draft for b in beams if b.status == dec.SKIPPED)
    assert all(b.steps == 3 and len(b.final) == 3 for b in beams if b.status == dec.CORRECTED)
    res = dec.finalize(beams, lookup_for(tiny_model))
    assert res.correction_steps == steps <= 3 * (len(beams) - res.skipped)
    assert res.skipped == len(beams) - len(pending) and res.corrected == len(pending)


def test_wider_correction_keeps_one_hypothesis(tiny_model):
    with ad.no_grad():
        enc = tiny_model.encode([[1, 2, 3]])
    beams = dec.beam_search_draft(tiny_model, enc, 4)[0]
    dec.reflect(tiny_model, enc, beams)
    steps = dec.correct_pass(tiny_model, enc, beams, width=3)
    assert all(len(b.final) == 3 and b.status == dec.CORRECTED for b in beams)
    assert steps > 0


def test_finalize_dedupes_and_counts_invalid():
    item_of = {(0,): 10, (1,): 10, (2,): None, (3,): 11}.get
    beams = [dec.Beam((i,), -float(i), egrs_score=-float(i), status=dec.CORRECTED, final=(i,)) for i in range(4)]
    res = dec.finalize(beams, lambda t: item_of(tuple(t)))
    assert res.ranked == [(10, 0.0), (11, -3.0)]
    assert res.invalid == 1
    assert len(res.ranked) <= len(beams)
    empty = dec.finalize([dec.Beam((2,), 0.0, final=(2,))], lambda t: item_of(tuple(t)))
    assert empty.ranked == [] and empty.invalid == 1


def test_egrs_degeneracy_matches_one_pass(tiny_model):
    item_of = lookup_for(tiny_model)
    hists = [[1, 2, 3], [4, 5], [6]]
    plain = dec.one_pass_decode(tiny_model, item_of, hists, 10)
    grc = dec.grc_decode(tiny_model, item_of, hists, dec.DecodeSettings(beam_size=10, alpha=0.0, force_skip=True))
    for a, b in zip(plain, grc):
        assert a.ranked == b.ranked
        assert b.correction_steps == 0


def test_correction_follows_reflection_on_trained_model():
    """Train a tiny model whose correction target is chosen by one reflection bit."""
    model = make_model(vocab=(4, 4), n_items=16, n_attrs=1, seed=2)
    rng = np.random.default_rng(0)
    records = []
    for _ in range(32):
        hist = [int(x) for x in rng.integers(16, size=3)]
        draft = [int(x) for x in rng.integers(4, size=2)]
        for bit in (0, 1):  # same context, only the bit decides the target
            gt = [0, 1] if bit else [3, 2]
            records.append(SFTRecord(0, hist, 0, draft, ReflectionLabel(1, (bit,)), gt))
    opt = ad.Adam(model.params, lr=1e-2)
    for _ in range(150):
        ad.reset_tape()
        loss = batch_loss(model, records, lambda_rc=1.0)
        ad.backward(loss)
        opt.step()
        model.zero_grad()
    with ad.no_grad():
        enc = model.encode([records[0].history])
    outs = []
    for bit in (0, 1):
        b = dec.Beam(tuple(records[0].draft), 0.0, reflection=(1, bit), user=0)
        dec.correct_pass(model, enc, [b])
        outs.append(b.final)
    assert outs[0] == (3, 2) and outs[1] == (0, 1)


def test_correction_logits_see_reflection(tiny_model):
    enc = tiny_model.encode([[1, 2]])
    draft = np.array([[0, 1, 2]])
    with ad.no_grad():
        a = tiny_model.decode_step(enc, PositionRole(CORRECTION, 0), draft=draft, reflection=np.array([[0, 0, 1]]),
                                   correction=np.zeros((1, 0), dtype=np.int64)).data
        b = tiny_model.decode_step(enc, PositionRole(CORRECTION, 0), draft=draft, reflection=np.array([[0, 1, 1]]),
                                   correction=np.zeros((1, 0), dtype=np.int64)).data
    assert np.abs(a - b).max() > 1e-9
