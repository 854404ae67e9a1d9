import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from partalign.evaluation import bleu, corpus_stats, length_bucket_report, _closest_ref_len

# Three sentence pairs with n-gram counts worked out by hand.
#
# 1. hyp "the cat sat on the mat" / ref "the cat is on the mat"
#    1g: the x2, cat, on, mat match; sat does not          5/6
#    2g: the cat, on the, the mat                           3/5
#    3g: on the mat                                         1/4
#    4g: none                                               0/3
# 2. hyp "a a a a" / ref "a b a b a"
#    1g: a clipped at 3                                     3/4
#    2g..4g: none                                 0/3, 0/2, 0/1
# 3. hyp "Hello World foo bar baz" / ref "hello world foo bar" (case folded)
#    1g 4/5, 2g 3/4, 3g 2/3, 4g 1/2
FIXTURE_HYPS = ["the cat sat on the mat", "a a a a", "Hello World foo bar baz"]
FIXTURE_REFS = ["the cat is on the mat", "a b a b a", "hello world foo bar"]
FIXTURE_MATCHES = [12, 6, 3, 1]
FIXTURE_TOTALS = [15, 12, 9, 6]
FIXTURE_LENS = (15, 15)


def split(lines):
    return [s.split() for s in lines]


def test_fixture_counts():
    m, t, h, r = corpus_stats(split(FIXTURE_HYPS), [[x] for x in split(FIXTURE_REFS)])
    assert m == FIXTURE_MATCHES and t == FIXTURE_TOTALS and (h, r) == FIXTURE_LENS


def test_fixture_score():
    rep = bleu(split(FIXTURE_HYPS), [[x] for x in split(FIXTURE_REFS)])
    expected = 100 * (12 / 15 * 6 / 12 * 3 / 9 * 1 / 6) ** 0.25
    assert rep.bleu == pytest.approx(expected, rel=1e-12)
    assert rep.bp == 1.0
    assert rep.line().startswith(f"BLEU = {expected:.2f}, 80.0/50.0/33.3/16.7 (BP=1.000, ratio=1.000")


def test_brevity_penalty():
    # hyp length 4 against ref length 6
    rep = bleu([["w", "x", "y", "z"]], [[["w", "x", "y", "z", "u", "v"]]])
    assert rep.bp == pytest.approx(math.exp(1 - 6 / 4))
    assert rep.bleu == pytest.approx(100 * math.exp(1 - 6 / 4))


def test_closest_reference_length_ties_shorter():
    assert _closest_ref_len(4, [3, 5]) == 3
    assert _closest_ref_len(4, [6, 5, 2]) == 5


def test_multi_reference_clipping_uses_max_count():
    hyp = [["a", "a", "b"]]
    refs = [[["a", "b", "c"], ["a", "a", "c"]]]
    m, _, _, _ = corpus_stats(hyp, refs)
    assert m[0] == 3


def test_identity_is_100():
    sents = split(FIXTURE_REFS)
    assert bleu(sents, [[s] for s in sents]).bleu == pytest.approx(100.0)


def test_zero_four_gram_matches():
    rep = bleu([["a", "b", "c", "d"]], [[["a", "b", "c", "x"]]])
    assert rep.matches[3] == 0
    assert rep.bleu == 0.0
    smoothed = bleu([["a", "b", "c", "d"]], [[["a", "b", "c", "x"]]], smooth=True)
    # 1g 3/4 unsmoothed; 2g..4g (2+1)/(3+1), (1+1)/(2+1), (0+1)/(1+1)
    assert smoothed.bleu == pytest.approx(100 * (3 / 4 * 3 / 4 * 2 / 3 * 1 / 2) ** 0.25)


def test_empty_corpus_rejected():
    with pytest.raises(ValueError):
        bleu([], [])
    with pytest.raises(ValueError):
        bleu([["a"]], [])


words = st.lists(st.sampled_from(["a", "b", "C", "d"]), min_size=1, max_size=8)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(words, words), min_size=1, max_size=5))
def test_case_invariance(pairs):
    hyps = [h for h, _ in pairs]
    refs = [[r] for _, r in pairs]
    upper = bleu([[w.upper() for w in h] for h in hyps], [[[w.upper() for w in r]] for (r,) in refs])
    assert bleu(hyps, refs).bleu == pytest.approx(upper.bleu)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(words, words), min_size=1, max_size=5))
def test_dropping_last_word_never_adds_unigram_matches(pairs):
    hyps = [h for h, _ in pairs]
    refs = [[r] for _, r in pairs]
    full = corpus_stats(hyps, refs)[0][0]
    cut = corpus_stats([h[:-1] for h in hyps], refs)[0][0]
    assert cut <= full


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(words, words), min_size=1, max_size=5))
def test_bleu_in_range(pairs):
    rep = bleu([h for h, _ in pairs], [[r] for _, r in pairs], smooth=True)
    assert 0.0 <= rep.bleu <= 100.0 + 1e-9


# ---------------------------------------------------------------------------
# length buckets


def test_single_bucket():
    hyps = [["a"] * 10, ["b"] * 10]
    out = length_bucket_report(hyps, [[h] for h in hyps], hyps)
    assert list(out) == ["[0,20)"]


def test_buckets_equal_subset_reruns():
    rng = np.random.default_rng(0)
    vocab = list("abcdef")
    sources = [list(rng.choice(vocab, n)) for n in [5, 25, 12, 30, 45]]
    refs = [list(rng.choice(vocab, len(s))) for s in sources]
    hyps = [list(rng.choice(vocab, len(s))) for s in sources]
    out = length_bucket_report(hyps, [[r] for r in refs], sources, smooth=True)
    assert list(out) == ["[0,20)", "[20,40)", "[40,60)"]
    for label, idx in [("[0,20)", [0, 2]), ("[20,40)", [1, 3]), ("[40,60)", [4])]:
        sub = bleu([hyps[i] for i in idx], [[refs[i]] for i in idx], smooth=True)
        assert out[label].bleu == pytest.approx(sub.bleu)
    whole = bleu(hyps, [[r] for r in refs], smooth=True).bleu
    assert whole != pytest.approx(np.mean([r.bleu for r in out.values()]))


def test_last_bucket_open_ended():
    src = [["x"] * 90]
    out = length_bucket_report(src, [src], src)
    assert list(out) == ["[80,inf)"]
