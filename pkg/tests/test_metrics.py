import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from caml_nmt.metrics import (brevity_penalty, clipped_matches, consistency_report, corpus_bleu,
                              degradation_curve, edit_distance, histogram, low_quality_count,
                              replacement_order, sentence_bleu, token_accuracy, translate)
from caml_nmt.trainer import EquivSet
from oracles import hand_bleu_components, naive_edit_distance

HYP = "the the the the the the the".split()
REF = "the cat is on the mat".split()

tokens = st.lists(st.sampled_from("abcde"), min_size=0, max_size=8)
nonempty = st.lists(st.sampled_from("abcde"), min_size=1, max_size=8)


def test_clipping_example_by_hand():
    assert clipped_matches(HYP, REF, 1) == (2, 7)
    assert clipped_matches(HYP, REF, 2) == (0, 6)
    assert brevity_penalty(7, 6) == 1.0
    assert corpus_bleu([HYP], [REF]) == 0.0
    want = 100 * math.exp((math.log(2 / 7) + math.log(1 / 7) + math.log(1 / 6) + math.log(1 / 5)) / 4)
    assert sentence_bleu(HYP, REF) == pytest.approx(want, rel=1e-15)


def test_identical_corpus_scores_100():
    corpus = [list("abcde"), list("bcdea"), list("aabbccdd")]
    assert corpus_bleu(corpus, corpus) == pytest.approx(100.0)


def test_corpus_bleu_errors():
    with pytest.raises(ValueError):
        corpus_bleu([], [])
    with pytest.raises(ValueError):
        corpus_bleu([["a"]], [])


def test_single_token_sentence_bleu_follows_add_one_smoothing():
    # p1 = 1/1; p2..p4 = (0 + 1) / (0 + 1); brevity penalty 1
    assert sentence_bleu(["a"], ["a"]) == pytest.approx(100.0)
    # p1 = 1/1; p2 = 1/2, p3 = 1/1, p4 = 1/1 for a two-token hypothesis vs one-token ref
    assert sentence_bleu(["a", "b"], ["a"]) == pytest.approx(100 * math.exp(math.log(0.5) / 4 + math.log(0.5) / 4))


def test_appending_a_wrong_token_lowers_sentence_bleu():
    ref = list("abcdab")
    assert sentence_bleu(ref + ["z"], ref) < sentence_bleu(ref, ref)


def test_sentence_bleu_needs_a_reference():
    with pytest.raises(ValueError):
        sentence_bleu(["a"], [])


@given(tokens, nonempty)
def test_sentence_bleu_matches_hand_formula(hyp, ref):
    m1, t1 = hand_bleu_components(hyp, ref, 1)
    if m1 == 0:
        assert sentence_bleu(hyp, ref) == 0.0
        return
    logs = [math.log(m1 / t1)]
    for n in (2, 3, 4):
        m, t = hand_bleu_components(hyp, ref, n)
        logs.append(math.log((m + 1) / (t + 1)))
    bp = 1.0 if len(hyp) > len(ref) else math.exp(1 - len(ref) / len(hyp))
    assert sentence_bleu(hyp, ref) == pytest.approx(100 * bp * math.exp(sum(logs) / 4), rel=1e-12)


@given(st.lists(st.tuples(nonempty, nonempty), min_size=1, max_size=6), st.randoms(use_true_random=False))
def test_corpus_bleu_ignores_sample_order(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    a = corpus_bleu([h for h, _ in pairs], [r for _, r in pairs])
    b = corpus_bleu([h for h, _ in shuffled], [r for _, r in shuffled])
    assert a == pytest.approx(b, abs=1e-9)
    assert 0.0 <= a <= 100.0 + 1e-9


@given(nonempty)
def test_corpus_bleu_of_self_is_100(h):
    assert corpus_bleu([h], [h]) == pytest.approx(100.0) or len(h) < 4


def test_edit_distance_examples():
    assert edit_distance(list("kitten"), list("sitting")) == 3
    assert edit_distance([], list("abc")) == 3
    assert edit_distance(list("abc"), list("abc")) == 0


@given(tokens, tokens)
def test_edit_distance_matches_naive_recursion(a, b):
    assert edit_distance(a, b) == naive_edit_distance(a, b)


@given(tokens, tokens, tokens)
def test_edit_distance_is_a_metric(a, b, c):
    assert edit_distance(a, b) == edit_distance(b, a)
    assert (edit_distance(a, b) == 0) == (a == b)
    assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)


def test_histogram_bins():
    counts = histogram([0, 19.9, 20, 55, 100, 100, 80], [0, 20, 40, 60, 80, 100])
    assert counts == [2, 1, 1, 0, 3]
    assert low_quality_count(counts) == 3
    with pytest.raises(ValueError):
        histogram([1], [0, 40, 20])


@given(st.lists(st.floats(0, 100), max_size=30))
def test_histogram_conserves_counts(scores):
    assert sum(histogram(scores)) == len(scores)


def test_token_accuracy():
    assert token_accuracy([[1, 2, 3]], [[1, 2, 3]]) == 1.0
    assert token_accuracy([[1, 2]], [[1, 2, 3]]) == pytest.approx(2 / 4)
    assert token_accuracy([[1, 2, 3, 4]], [[1, 2, 3]]) == pytest.approx(3 / 4)


def random_sets(n, rng, size=3):
    sets = []
    for _ in range(n):
        x = rng.integers(5, 11, size=rng.integers(1, 5)).tolist()
        alts = [rng.integers(5, 11, size=rng.integers(1, 5)).tolist() for _ in range(size - 1)]
        sets.append(EquivSet(x, [5, 6], [x] + alts))
    return sets


def test_consistency_report_on_random_model(small):
    model, params = small
    sets = random_sets(50, np.random.default_rng(0))
    sets[3] = EquivSet([5], [5], [[5]])
    r = consistency_report(model, params, sets)
    assert r.n_sets == 49 and r.skipped_sets == 1
    assert r.n_pairs == 49 * 3
    assert 0.0 <= r.exact_match_rate <= 1.0 and 0.0 <= r.mean_pairwise_output_bleu <= 100.0
    assert np.isfinite(r.mean_encoder_distance) and r.mean_encoder_distance > 0


def test_consistency_of_an_input_blind_model_is_perfect(small):
    model, params = small
    for name in params:
        if ".cross." in name:
            params[name].data = np.zeros_like(params[name].data)
    r = consistency_report(model, params, random_sets(10, np.random.default_rng(1)))
    assert r.exact_match_rate == 1.0 and r.mean_pairwise_output_bleu == pytest.approx(100.0)


def test_consistency_needs_pairs(small):
    model, params = small
    with pytest.raises(ValueError):
        consistency_report(model, params, [EquivSet([5], [5], [[5]])])


def test_degradation_curve(small):
    model, params = small
    rng = np.random.default_rng(2)
    samples = [(rng.integers(5, 11, size=3).tolist(), rng.integers(5, 10, size=3).tolist()) for _ in range(20)]
    para = [rng.integers(5, 11, size=3).tolist() for _ in range(20)]
    curve = degradation_curve(model, params, samples, para, seed=1)
    refs = [y for _, y in samples]
    assert curve.bleu[0] == corpus_bleu(translate(model, params, [x for x, _ in samples]), refs)
    flat = degradation_curve(model, params, samples, [x for x, _ in samples], seed=1)
    assert len(set(flat.bleu)) == 1 and flat.drop() == 0.0
    with pytest.raises(ValueError):
        degradation_curve(model, params, samples, para, proportions=(0.0, 1.5))


def test_replacement_subsets_are_nested():
    order = replacement_order(40, 3)
    assert sorted(order.tolist()) == list(range(40))
    assert order.tolist() == replacement_order(40, 3).tolist()
