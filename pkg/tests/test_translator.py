import itertools
import math
import random

import pytest
import torch
from hypothesis import given, settings, strategies as st

from spatialnli import kernel as K
from spatialnli.translator import (
    EOS, TranslatorConfig, TranslatorModel, VocabularyOverflow, beam_search, bracket_constraint, decode, infer,
    score_sequence, source_tokens, target_tokens, train_translator,
)

SA_Q = "what is the <k0> population <eok> of <k1> cityid <eok> <v0> San Antonio <eov> ?"
SA_L = "answer(A,<k0>(B,A),const(B,<k1>(<v0>)))"


def _toy_step(seed):
    """Deterministic prefix-dependent distribution over {a, b, EOS}."""
    def step(state, prefix):
        rng = random.Random(f"{seed}:{' '.join(prefix)}")
        w = [rng.random() + 0.05 for _ in range(3)]
        z = sum(w)
        return {t: math.log(x / z) for t, x in zip(("a", "b", EOS), w)}, state
    return step


def _exhaustive(step, max_len):
    best = []
    for n in range(max_len + 1):
        for seq in itertools.product("ab", repeat=n):
            score = 0.0
            for i, tok in enumerate(seq + (EOS,)):
                score += step(None, seq[:i])[0][tok]
            best.append((score, seq))
    return max(best)


@pytest.mark.parametrize("seed", range(20))
def test_wide_beam_finds_the_exhaustive_optimum(seed):
    step = _toy_step(seed)
    score, seq = _exhaustive(step, 3)
    top = beam_search(step, None, width=64, max_len=3)[0]
    assert top.tokens == seq and top.score == pytest.approx(score)


@pytest.mark.parametrize("seed", range(10))
def test_width_one_is_greedy(seed):
    step = _toy_step(seed)
    prefix = ()
    while True:
        dist, _ = step(None, prefix)
        if len(prefix) == 4:
            dist = {EOS: dist[EOS]}
        tok = max(sorted(dist), key=dist.get)
        if tok == EOS:
            break
        prefix += (tok,)
    assert beam_search(step, None, width=1, max_len=4)[0].tokens == prefix


def test_beam_width_must_be_positive():
    with pytest.raises(ValueError):
        beam_search(_toy_step(0), None, width=0, max_len=3)


def test_bracket_constraint():
    ok = target_tokens("answer(A,population(B,A))")
    for i, tok in enumerate(ok):
        assert bracket_constraint(ok[:i], tok)
    assert bracket_constraint(ok, EOS)
    assert not bracket_constraint(ok, ",")
    assert not bracket_constraint(["answer", "("], ")")
    assert not bracket_constraint(["answer", "(", "a"], EOS)
    assert not bracket_constraint([], ")")


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(["f", "a", "(", ")", ","]), max_size=12))
def test_constrained_prefixes_never_close_below_zero(toks):
    prefix = []
    for tok in toks:
        if bracket_constraint(prefix, tok):
            prefix.append(tok)
    depth = 0
    for tok in prefix:
        depth += (tok == "(") - (tok == ")")
        assert depth >= 0


def _tiny(copy=True, dtype=torch.float64):
    src, tgt = source_tokens(SA_Q), target_tokens(SA_L)
    cfg = TranslatorConfig(embed_dim=4, enc_hidden=3, dec_hidden=3, attn_dim=2, symbol_slots=4, copy=copy)
    return TranslatorModel(src + tgt, tgt, cfg, None, dtype), src, tgt


@pytest.mark.parametrize("copy", [True, False])
def test_grad_check_translator(copy):
    m, src, tgt = _tiny(copy)
    batch = [(src, tgt, m.target_mask(src, tgt))]
    # the loss is ~70 nats, so differences at eps=1e-5 carry ~1e-9 round-off
    assert K.grad_check(lambda: m.loss(batch), m.store, floor=1e-4) <= 1e-4


def test_batched_loss_equals_per_example_mean():
    m, src, tgt = _tiny()
    src2 = source_tokens("<k0> how many <eok> <k1> rivers <eok> ?")
    tgt2 = target_tokens("answer(A,<k0>(B,<k1>(B),A))")
    batch = [(s, t, m.target_mask(s, t)) for s, t in ((src, tgt), (src2, tgt2))]
    per = -(m.sequence_logprob(src, tgt) + m.sequence_logprob(src2, tgt2)) / 2
    assert float(m.loss(batch).detach()) == pytest.approx(float(per.detach()), rel=1e-10)


def test_copy_slots_cover_source_tokens():
    m, src, tgt = _tiny()
    mask = m.target_mask(src, tgt)
    j = src.index("<v0>")
    row = tgt.index("<v0>")
    assert mask[row, len(m.out_vocab) + j]
    with pytest.raises(VocabularyOverflow):
        m.target_mask(src, ["nonsense"])


def test_symbol_index_overflow():
    m, _, _ = _tiny()
    with pytest.raises(VocabularyOverflow):
        m.embed_token("<k9>")


def test_overfits_one_pair_and_round_trips(tmp_path):
    cfg = TranslatorConfig(embed_dim=16, enc_hidden=24, dec_hidden=24, attn_dim=16, lr=3e-3, epochs=300,
                           batch_size=1, seed=0)
    model = train_translator([(SA_Q, SA_L)], cfg, target_loss=1e-3)
    assert infer(model, SA_Q) == SA_L
    model.save(tmp_path / "t.npz")
    again = TranslatorModel.load(tmp_path / "t.npz")
    assert infer(again, SA_Q) == SA_L
    assert score_sequence(again, SA_Q, SA_L) == pytest.approx(score_sequence(model, SA_Q, SA_L), abs=1e-5)
    hyps = decode(model, SA_Q, width=3)
    assert [h.score for h in hyps] == sorted((h.score for h in hyps), reverse=True)
