"""Tests for text metrics, answer parsing and task metrics.

Expected values are worked out by hand in the comments next to each case.
"""

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from molx.data import CLASSIFY, DESCRIPTION, REGRESS
from molx.eval import (
    align,
    bleu_detail,
    bleu_n,
    classification_metrics,
    count_chunks,
    evaluate_answers,
    lcs_length,
    meteor_lite,
    metric_tokens,
    parse_answer,
    regression_metrics,
    rouge,
    stem,
    text_report,
)

WORDS = st.lists(st.sampled_from(["a", "b", "c", "d", "e", "cat", "cats"]), min_size=1, max_size=8).map(" ".join)


class TestTokens:
    def test_lowercase_and_punctuation(self):
        assert metric_tokens("The Cat, sat.") == ["the", "cat", ",", "sat", "."]


class TestBleu:
    def test_identical(self):
        assert bleu_n("the cat sat on the mat", "the cat sat on the mat", 4) == pytest.approx(1.0, abs=1e-12)

    def test_no_overlap_hits_epsilon_floor(self):
        # every precision is 1e-9 / count, so the score is about 1e-9
        assert bleu_n("x y z", "a b c", 2) < 1e-8

    def test_short_candidate(self):
        # p1 = 3/3, p2 = 2/2, brevity penalty exp(1 - 4/3)
        r = bleu_detail("the cat sat", "the cat sat down", 2)
        assert r.precisions == (1.0, 1.0)
        assert r.brevity_penalty == pytest.approx(math.exp(1 - 4 / 3), abs=1e-12)
        assert r.score == pytest.approx(0.7165313105737893, abs=1e-6)

    def test_short_candidate_bleu4(self):
        # p3 = 1/1, p4 = 1e-9 / max(0, 1) -> geometric mean (1e-9) ** 0.25
        assert bleu_n("the cat sat", "the cat sat down", 4) == pytest.approx(
            math.exp(-1 / 3) * 1e-9**0.25, abs=1e-6
        )

    def test_clipped_counts(self):
        # "the the the" vs "the cat": p1 = 1/3, p2 = eps/2, no brevity penalty (3 >= 2)
        expected = math.sqrt((1 / 3) * (1e-9 / 2))
        assert bleu_n("the the the", "the cat", 2) == pytest.approx(expected, abs=1e-12)

    def test_empty_candidate_flagged(self):
        r = bleu_detail("", "a b", 2)
        assert r.score == 0.0 and r.empty_candidate

    def test_bleu4_can_exceed_bleu2(self):
        # clipping makes p1 = 4/5 (the second "c" is unmatched) while every bigram,
        # trigram and 4-gram matches, so the higher-order mean is larger
        c, r = "c a b a c", "b a b a c a b a"
        assert bleu_detail(c, r, 4).precisions == (0.8, 1.0, 1.0, 1.0)
        assert bleu_n(c, r, 4) > bleu_n(c, r, 2)

    def test_bleu2_at_least_bleu4_on_prefixes(self):
        # a prefix of the reference matches every n-gram; only brevity matters
        r = "the cat sat on the mat"
        for k in range(4, 7):
            c = " ".join(r.split()[:k])
            assert bleu_n(c, r, 2) >= bleu_n(c, r, 4) - 1e-15

    @settings(max_examples=200, deadline=None)
    @given(WORDS, WORDS)
    def test_bounded_and_deterministic(self, c, r):
        v = bleu_n(c, r, 4)
        assert 0.0 <= v <= 1.0 + 1e-12
        assert v == bleu_n(c, r, 4)


class TestRouge:
    def test_identical(self):
        for v in (1, 2, "L"):
            assert rouge("a b c d", "a b c d", v) == pytest.approx(1.0)

    def test_disjoint(self):
        for v in (1, 2, "L"):
            assert rouge("a b", "c d", v) == 0.0

    def test_lcs_example(self):
        # LCS("a b c d", "a c d") = 3; P = 3/4, R = 3/3
        assert lcs_length("a b c d".split(), "a c d".split()) == 3
        assert rouge("a b c d", "a c d", "L") == pytest.approx(2 * 0.75 * 1 / 1.75, abs=1e-6)

    def test_bigram_example(self):
        # candidate bigrams ab, bc, cd; reference ac, cd; overlap 1 -> P 1/3, R 1/2, F1 0.4
        assert rouge("a b c d", "a c d", 2) == pytest.approx(0.4, abs=1e-6)

    def test_both_empty(self):
        assert rouge("", "", 1) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(WORDS, st.integers(0, 7))
    def test_deleting_from_perfect_never_helps(self, text, k):
        tokens = text.split()
        shorter = " ".join(tokens[:k] + tokens[k + 1 :])
        for v in (1, 2, "L"):
            assert rouge(shorter, text, v) <= rouge(text, text, v) + 1e-12


class TestMeteor:
    def test_identical_four_tokens(self):
        # m = 4, P = R = 1, Fmean = 1, one chunk: penalty 0.5 * (1/4)^3
        assert meteor_lite("the cat sat down", "the cat sat down") == pytest.approx(1 - 0.5 / 64, abs=1e-6)

    def test_stem_match(self):
        # "cats" matches "cat" after suffix stripping; 3 matches in one chunk
        assert meteor_lite("the cats sat", "the cat sat") == pytest.approx(1 - 0.5 / 27, abs=1e-6)

    def test_permutation_adds_chunks(self):
        # alignment (0,2) (1,0) (2,1): two chunks; penalty 0.5 * (2/3)^3
        assert count_chunks(align("sat the cat".split(), "the cat sat".split())) == 2
        assert meteor_lite("sat the cat", "the cat sat") == pytest.approx(1 - 0.5 * (2 / 3) ** 3, abs=1e-6)
        assert meteor_lite("sat the cat", "the cat sat") < meteor_lite("the cat sat", "the cat sat")

    def test_recall_weighting(self):
        # candidate "a" vs reference "a b": P = 1, R = 1/2, Fmean = 10PR / (R + 9P) = 5 / 9.5
        expected = (10 * 1 * 0.5 / (0.5 + 9)) * (1 - 0.5)
        assert meteor_lite("a", "a b") == pytest.approx(expected, abs=1e-6)

    def test_no_overlap(self):
        assert meteor_lite("x y", "a b") == 0.0

    @pytest.mark.parametrize("word, root", [("cats", "cat"), ("boxes", "box"), ("jumped", "jump"), ("going", "go"), ("is", "is")])
    def test_stemmer(self, word, root):
        assert stem(word) == root


class TestParsing:
    def test_first_number(self):
        assert parse_answer("The molecular weight is 46.07 g/mol", REGRESS).value == 46.07

    def test_yes(self):
        assert parse_answer("Yes, it contains a ring.", CLASSIFY).value is True

    def test_no_case_insensitive(self):
        assert parse_answer("NO", CLASSIFY).value is False

    def test_unparseable(self):
        p = parse_answer("It is a molecule.", REGRESS)
        assert not p.parseable and p.value is None

    def test_substring_not_a_label(self):
        assert not parse_answer("Nothing known", CLASSIFY).parseable


class TestTaskMetrics:
    def test_perfect(self):
        assert regression_metrics([(1.0, 1.0), (2.0, 2.0)]).rmse == 0.0
        m = classification_metrics([(True, True), (False, False)])
        assert (m.accuracy, m.f1) == (1.0, 1.0)

    def test_offset_by_one(self):
        assert regression_metrics([(t + 1, t) for t in (0.0, 3.0, 7.5)]).rmse == pytest.approx(1.0)

    def test_confusion_matrix(self):
        # TP 2, FP 1, FN 1, TN 6 -> F1 = 4 / 6, ACC = 8 / 10
        pairs = [(True, True)] * 2 + [(True, False)] + [(False, True)] + [(False, False)] * 6
        m = classification_metrics(pairs)
        assert m.f1 == pytest.approx(2 * 2 / (2 * 2 + 1 + 1), abs=1e-6)
        assert m.accuracy == pytest.approx(0.8, abs=1e-12)

    def test_unparseable_counts_as_wrong(self):
        m = classification_metrics([(None, True), (True, True)])
        assert m.accuracy == 0.5 and m.unparseable == 1

    def test_regression_excludes_unparseable(self):
        m = regression_metrics([(None, 3.0), (2.0, 1.0)])
        assert m.rmse == 1.0 and m.unparseable == 1 and m.n == 2

    def test_empty_regression_marker(self):
        assert regression_metrics([(None, 1.0)]).rmse is None


class TestReport:
    def test_table_columns(self):
        report = text_report("description", ["a b c"], ["a b c"])
        head = report.table().splitlines()[0].split()
        assert head == ["BLE-2", "BLE-4", "ROG-1", "ROG-2", "ROG-L", "MET"]

    def test_per_example_average(self):
        r = text_report("description", ["a b", "x"], ["a b", "y"])
        assert r.metrics["rouge1"] == pytest.approx(0.5)

    def test_classification_report(self):
        r = evaluate_answers(CLASSIFY, ["Yes", "maybe"], ["Yes", "No"])
        assert r.metrics["accuracy"] == 0.5 and r.unparseable == 1

    def test_json(self):
        r = evaluate_answers(DESCRIPTION, ["a"], ["a"])
        assert '"version": 1' in r.to_json()
