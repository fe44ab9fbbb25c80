import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avfuse.metrics import bleu, corpus_wer, normalize, token_accuracy, tokenize_13a, wer


def naive_edit_distance(a, b):
    """Full-matrix Levenshtein written independently of the library version."""
    rows = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        rows[i][0] = i
    for j in range(len(b) + 1):
        rows[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            rows[i][j] = min(
                rows[i - 1][j] + 1,
                rows[i][j - 1] + 1,
                rows[i - 1][j - 1] + (a[i - 1] != b[j - 1]),
            )
    return rows[-1][-1]


def random_pairs(n, seed=0):
    rng = np.random.default_rng(seed)
    words = ["a", "b", "c", "d", "e"]
    pairs = []
    for _ in range(n):
        r = rng.choice(words, size=rng.integers(1, 9)).tolist()
        h = rng.choice(words, size=rng.integers(0, 9)).tolist()
        pairs.append((" ".join(r), " ".join(h)))
    return pairs


# -- normalisation -------------------------------------------------------------

def test_normalize_examples():
    assert normalize("Hello, World!") == "hello world"
    assert normalize("a  b") == "a b"
    assert normalize("  Tabs\tand\nlines ") == "tabs and lines"
    assert normalize("«Quoted» — text…") == "quoted text"


@given(st.text(max_size=40))
def test_normalize_idempotent(s):
    once = normalize(s)
    assert normalize(once) == once


# -- WER -----------------------------------------------------------------------

def test_wer_identical_and_substitution():
    assert wer("a b c", "a b c").wer == 0
    res = wer("a b c", "a x c")
    assert res.wer == pytest.approx(1 / 3)
    assert (res.substitutions, res.insertions, res.deletions) == (1, 0, 0)


def test_wer_insertions_and_deletions():
    res = wer("a b c", "a b")
    assert (res.substitutions, res.insertions, res.deletions) == (0, 0, 1)
    res = wer("a b", "a b c d")
    assert (res.substitutions, res.insertions, res.deletions) == (0, 2, 0)
    assert res.wer == 1.0


def test_wer_matches_naive_dp():
    for ref, hyp in random_pairs(200):
        res = wer(ref, hyp)
        d = naive_edit_distance(ref.split(), hyp.split())
        assert res.errors == d
        assert res.wer == d / len(ref.split())


def test_wer_empty_reference():
    with pytest.raises(ValueError):
        wer("", "a")


def test_wer_zero_iff_equal():
    for ref, hyp in random_pairs(100, seed=1):
        assert (wer(ref, hyp).wer == 0) == (ref == hyp)


def test_wer_asymmetric_for_unequal_lengths():
    # same edit distance both ways, but normalised by different reference lengths
    assert wer("a b", "a b c d").wer == 1.0
    assert wer("a b c d", "a b").wer == 0.5
    # equal lengths: symmetric
    assert wer("a b c", "a x y").wer == wer("a x y", "a b c").wer


def test_corpus_wer_pools_counts():
    assert corpus_wer(["a b", "c d e f"], ["a x", "c d e f"]) == pytest.approx(1 / 6)


# -- BLEU ----------------------------------------------------------------------

def test_bleu_perfect():
    refs = ["the cat sat on the mat", "a quick brown fox jumps"]
    assert bleu(refs, refs).score == 100.0


def test_bleu_no_fourgram_matches_is_zero():
    res = bleu(["a b c d e"], ["a b c x e"])
    assert res.matches[3] == 0
    assert res.score == 0.0


def test_bleu_clipped_unigram():
    res = bleu(["the the the the"], ["the cat is here"])
    assert res.precisions[0] == pytest.approx(1 / 4)


def test_bleu_hand_computed():
    # one mismatch in the middle kills every 4-gram of a 5-token sentence
    assert bleu(["a b x d e"], ["a b c d e"]).score == 0.0
    hyp = ["w1 w2 w3 w4 w5 w6"]
    ref = ["w1 w2 w3 w4 w5 w9"]
    res = bleu(hyp, ref)
    expected = 100 * np.exp(np.mean(np.log([5 / 6, 4 / 5, 3 / 4, 2 / 3])))
    assert res.score == pytest.approx(expected, rel=1e-12)


def test_bleu_brevity_penalty():
    res = bleu(["w1 w2 w3 w4"], ["w1 w2 w3 w4 w5 w6 w7 w8"])
    assert res.brevity_penalty == pytest.approx(np.exp(1 - 8 / 4))
    assert res.score == pytest.approx(100 * np.exp(-1))


def test_bleu_errors():
    with pytest.raises(ValueError):
        bleu(["a"], ["a", "b"])
    with pytest.raises(ValueError):
        bleu(["a"], [""])
    with pytest.raises(ValueError):
        bleu([], [])


def test_tokenize_13a_splits_punctuation():
    assert tokenize_13a("Hello, world!") == ["Hello", ",", "world", "!"]
    assert tokenize_13a("3.14 and 1,000") == ["3.14", "and", "1,000"]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(st.sampled_from(list("abcdefg")), min_size=1, max_size=8), min_size=1, max_size=5))
def test_bleu_self_is_100(sents):
    refs = [" ".join(s) for s in sents]
    res = bleu(refs, refs)
    assert res.score == 100.0 or min(res.totals) == 0


# -- token accuracy ------------------------------------------------------------

def test_token_accuracy_one_hot():
    t = np.array([[1, 2, 3]])
    logits = np.eye(5)[t]
    assert token_accuracy(logits, t, np.ones_like(t, dtype=bool)) == 1.0


def test_token_accuracy_uniform_binomial():
    rng = np.random.default_rng(0)
    logits = rng.normal(0, 1e-9, size=(1000, 8))  # effectively uniform, random argmax
    targets = rng.integers(0, 8, 1000)
    acc = token_accuracy(logits, targets, np.ones(1000, dtype=bool))
    assert abs(acc - 1 / 8) <= 0.04


def test_token_accuracy_masked():
    t = np.array([0, 1, 2])
    logits = np.eye(3)[[0, 0, 0]]
    assert token_accuracy(logits, t, np.array([True, False, False])) == 1.0
    with pytest.raises(ValueError):
        token_accuracy(logits, t, np.zeros(3, dtype=bool))
