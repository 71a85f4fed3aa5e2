import math

import numpy as np
import pytest

from mmprotect import text_protect as tp
from mmprotect.tokenizer import MiniTokenizer


def test_insert_examples():
    assert tp.insert([5, 6], tp.Trigger([], "append")) == ([5, 6], (2, 2))
    assert tp.insert([5, 6], tp.Trigger([9], "append")) == ([5, 6, 9], (2, 3))
    ids, span = tp.insert([5, 6, 7], tp.Trigger([9, 8], "prepend"))
    assert ids == [9, 8, 5, 6, 7] and tp.remove_span(ids, span) == [5, 6, 7]
    ids, span = tp.insert([5, 6, 7], tp.Trigger([9], 1))
    assert ids == [5, 9, 6, 7] and span == (1, 2)


def test_insert_bad_position():
    with pytest.raises(ValueError):
        tp.insert([5, 6], tp.Trigger([9], 5))


def test_feasibility_rule():
    assert tp.is_feasible(tp.Trigger([1, 2]), {1, 2, 3}, 5)
    assert not tp.is_feasible(tp.Trigger([1, 4]), {1, 2, 3}, 5)
    assert not tp.is_feasible(tp.Trigger([1] * 6), {1}, 5)


def test_hotflip_hand_example():
    emb = np.array([[0.0, 0.0], [1.0, 0.0]])
    s = tp.hotflip_scores(np.array([1.0, -1.0]), 0, [0, 1], emb)
    assert s == {0: 0.0, 1: 1.0}


def test_hotflip_linearity(rng):
    emb = rng.normal(size=(10, 4))
    g = rng.normal(size=4)
    a = tp.hotflip_scores(g, 3, range(10), emb)
    b = tp.hotflip_scores(2 * g, 3, range(10), emb)
    assert all(b[v] == pytest.approx(2 * a[v]) for v in a)
    assert tp.screen_candidates(a, 10) == tp.screen_candidates(b, 10)


def test_screen_examples():
    assert tp.screen_candidates({1: -2.0, 2: -1.0, 3: 3.0}, 1) == [1]
    assert sorted(tp.screen_candidates({1: -2.0, 2: -1.0, 3: 3.0}, 9)) == [1, 2, 3]
    assert tp.screen_candidates({7: 0.0, 4: 0.0, 5: 0.0}, 2) == [4, 5]
    with pytest.raises(ValueError):
        tp.screen_candidates({1: 0.0}, 0)


def test_verify_incumbent_only_and_ties():
    best, losses = tp.verify_candidates(4, [4], lambda vs: [1.0 for _ in vs])
    assert best == 4 and losses == {4: 1.0}
    best, _ = tp.verify_candidates(4, [2, 9], lambda vs: [1.0 for _ in vs])
    assert best == 4
    best, _ = tp.verify_candidates(4, [9, 2], lambda vs: [2.0 if v == 4 else 1.0 for v in vs])
    assert best == 2


def test_verify_skips_nonfinite_candidates():
    best, _ = tp.verify_candidates(4, [1], lambda vs: [math.inf if v == 1 else 3.0 for v in vs])
    assert best == 4


def test_full_shortlist_equals_exhaustive(rng):
    table = rng.normal(size=80)
    evaluate = lambda vs: [float(table[v]) for v in vs]
    best, _ = tp.verify_candidates(5, list(range(80)), evaluate)
    assert best == tp.exhaustive_argmin(range(80), evaluate)


def test_surface_and_retokenize_plain(tok):
    ids = tok.encode("what shape is shown?")
    trig = tp.Trigger([tok.encode(" cat")[0]], "append")
    text, cspan = tp.surface(tok, ids, trig)
    assert text == "what shape is shown? cat" and text[cspan[0]:cspan[1]] == " cat"
    rids, span = tp.retokenize(tok, text, cspan)
    assert rids[span[0]:span[1]] == trig.tokens


def test_retokenize_absorbs_boundary_merge():
    t = MiniTokenizer.train([" xa"] * 5 + ["ab"] * 3 + [" x"] * 4, 3)
    text_ids = t.encode("ab")
    trig = tp.Trigger(t.encode(" x"), "prepend")
    assumed, _ = tp.insert(text_ids, trig)
    text, cspan = tp.surface(t, text_ids, trig)
    ids, span = tp.retokenize(t, text, cspan)
    assert ids != assumed
    assert [t.token_string(i) for i in ids] == [" xa", "b"]
    assert span == (0, 1)


def test_lemma1_exhaustive_gap_zero():
    rep = tp.lemma1_oracle(50, seed=0, k=80)
    assert rep["holds"] and rep["max_gap"] == 0.0


def test_lemma1_k1_thousand_trials():
    rep = tp.lemma1_oracle(1000, seed=0, k=1)
    assert rep["violations"] == 0 and rep["holds"]
    # frozen from the seeded run: the observed gap never exceeds ~31% of R^2
    assert rep["max_gap_over_bound"] == pytest.approx(0.3095305193345388, rel=1e-9)


def test_lemma1_embedding_target():
    rep = tp.lemma1_oracle(200, seed=3, k=4, target="embedding")
    assert rep["holds"]


def test_lemma1_flipped_sign_is_caught():
    flipped = lambda g, c, cs, e: {k: -v for k, v in tp.hotflip_scores(g, c, cs, e).items()}
    assert not tp.lemma1_oracle(1000, seed=0, k=1, score_fn=flipped)["holds"]
