import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from efuf.errors import DegenerateVarianceError
from efuf.lexicon import Lexicon
from efuf.metrics import (
    AnnotatedResponse,
    annotate_with_lexicon,
    bleu_n,
    chair,
    corpus_bleu,
    density_export,
    fluency,
    threshold_purity,
    welch_ttest,
    write_histogram_csv,
)


def resp(image_id, labels):
    return AnnotatedResponse(
        image_id=image_id, text="t", mentions=tuple((f"o{i}", l) for i, l in enumerate(labels))
    )


# -- chair ---------------------------------------------------------------------


def test_chair_no_hallucinations():
    chair_s, chair_i = chair([resp("a", [0, 0, 0, 0, 0])])
    assert (chair_s, chair_i) == (0.0, 0.0)


def test_chair_direct_counting_example():
    responses = [
        resp("a", [1, 0]),           # 2 objects, 1 hallucinated
        resp("b", [0, 0, 0]),        # 3 objects, 0
        resp("c", [0]),              # 1 object, 0
        resp("d", [1, 1, 0, 0]),     # 4 objects, 2
    ]
    chair_s, chair_i = chair(responses)
    assert chair_i == pytest.approx(3 / 10)
    assert chair_s == pytest.approx(2 / 4)


def test_chair_matches_recount_oracle_and_is_order_invariant():
    rng = np.random.default_rng(23)
    responses = []
    for i in range(100):
        labels = rng.integers(0, 2, size=rng.integers(1, 6)).tolist()
        responses.append(resp(f"r{i}", labels))
    chair_s, chair_i = chair(responses)
    # oracle: independent counting pass
    total = hal = hal_resp = 0
    for r in responses:
        had = False
        for _, label in r.mentions:
            total += 1
            if label == 1:
                hal += 1
                had = True
        hal_resp += 1 if had else 0
    assert chair_i == hal / total
    assert chair_s == hal_resp / 100
    assert 0.0 <= chair_i <= 1.0 and 0.0 <= chair_s <= 1.0
    shuffled = [responses[i] for i in rng.permutation(100)]
    assert chair(shuffled) == (chair_s, chair_i)


def test_chair_rejects_zero_objects():
    with pytest.raises(ValueError):
        chair([resp("a", [])])
    with pytest.raises(ValueError):
        chair([])


def test_annotate_with_lexicon_labels_against_gt():
    lex = Lexicon.bundled()
    r = annotate_with_lexicon("i", "A cat and a kite, with two dogs.", {"cat", "dog"}, lex)
    assert r.mentions == (("cat", 0), ("kite", 1), ("dogs", 0))


def test_annotated_response_validates_labels():
    with pytest.raises(ValueError):
        AnnotatedResponse(image_id="i", text="t", mentions=(("cat", 2),))


# -- bleu ------------------------------------------------------------------------


def oracle_bleu(candidate, references, n):
    """Independent textbook BLEU: clipped modified precision, uniform weights,
    brevity penalty with closest reference length (ties to the shorter)."""
    cand = candidate.split()
    refs = [r.split() for r in references]
    if not cand:
        return 0.0
    precisions = []
    for k in range(1, n + 1):
        cand_grams = [tuple(cand[i : i + k]) for i in range(len(cand) - k + 1)]
        if not cand_grams:
            return 0.0
        cand_counts = Counter(cand_grams)
        clipped = 0
        for gram, count in cand_counts.items():
            best = max((Counter(tuple(r[i : i + k]) for i in range(len(r) - k + 1))[gram] for r in refs))
            clipped += min(count, best)
        if clipped == 0:
            return 0.0
        precisions.append(clipped / len(cand_grams))
    geo = math.exp(sum(math.log(p) for p in precisions) / n)
    r_len = min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
    bp = 1.0 if len(cand) > r_len else math.exp(1 - r_len / len(cand))
    return bp * geo


def test_bleu_identity_and_disjoint():
    assert bleu_n("a cat on a mat", ["a cat on a mat"], 4) == pytest.approx(1.0)
    assert bleu_n("x y z", ["a b c"], 1) == 0.0
    assert bleu_n("", ["a b"], 2) == 0.0


@settings(max_examples=60)
@given(st.lists(st.sampled_from(["cat", "dog", "sits", "a", "the"]), min_size=1, max_size=8))
def test_bleu_self_identity_property(words):
    text = " ".join(words)
    assert bleu_n(text, [text], 4) == pytest.approx(1.0)


def test_bleu_matches_reference_oracle_on_fixed_corpus():
    corpus = [
        ("a cat sitsceremoniously on the mat", ["a cat sits on the mat", "the cat sat on a mat"]),
        ("two dogs run across a field", ["two dogs run across the green field"]),
        ("a man rides a horse", ["a man rides a brown horse", "someone rides a horse"]),
        ("the kite flies high above", ["a kite flies above the beach"]),
        ("a bowl of fruit on a table", ["a bowl of fruit sits on the table"]),
    ]
    for n in (1, 2, 4):
        for candidate, references in corpus:
            assert bleu_n(candidate, references, n) == pytest.approx(
                oracle_bleu(candidate, references, n), abs=1e-6
            )


def test_bleu_removing_shared_ngram_never_increases_score():
    references = ["a cat sits on the mat"]
    full = bleu_n("a cat sits on the mat", references, 2)
    # replace a shared token with an unmatched one, holding length fixed
    weaker = bleu_n("a cat sits on the zzz", references, 2)
    assert weaker <= full


def test_corpus_bleu_aggregates_counts():
    pairs = [
        ("a cat", ["a cat"]),
        ("a dog runs", ["a dog walks"]),
    ]
    # corpus-level: pooled clipped counts, not a mean of per-sentence scores
    got = corpus_bleu(pairs, 1)
    assert got == pytest.approx((2 + 2) / (2 + 3), abs=1e-12)  # bp = 1 (5 vs 5)


def test_bleu_validates_inputs():
    with pytest.raises(ValueError):
        bleu_n("a", ["a"], 3)
    with pytest.raises(ValueError):
        bleu_n("a", [], 1)


# -- fluency ----------------------------------------------------------------------


class StubScorer:
    scorer_id = "stub"

    def __init__(self, log_probs):
        self._lp = log_probs

    def token_log_probs(self, text):
        return self._lp


def test_fluency_perfect_scorer_is_zero():
    assert fluency(StubScorer([0.0, 0.0, 0.0]), "a b c") == 0.0


def test_fluency_uniform_scorer_is_log_vocab():
    v = 50
    lp = [math.log(1.0 / v)] * 4
    assert fluency(StubScorer(lp), "a b c d") == pytest.approx(math.log(v), abs=1e-12)


def test_fluency_hand_computed():
    lp = [math.log(0.5), math.log(0.25), math.log(0.125)]
    want = -(sum(lp)) / 3
    assert fluency(StubScorer(lp), "x y z") == pytest.approx(want, abs=1e-12)
    assert fluency(StubScorer(lp), "x y z") == pytest.approx(
        (math.log(2) + math.log(4) + math.log(8)) / 3, abs=1e-12
    )


def test_fluency_rejects_empty_text():
    with pytest.raises(ValueError):
        fluency(StubScorer([0.0]), "")


# -- welch t-test -------------------------------------------------------------------


def test_welch_identical_samples():
    t, p = welch_ttest([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert t == 0.0 and p == pytest.approx(1.0)
    t, p = welch_ttest([1.0, 2.0, 3.0], [3.0, 1.0, 2.0])  # permutation of identical data
    assert t == 0.0 and p == pytest.approx(1.0)


def test_welch_matches_scipy_on_seeded_pairs():
    rng = np.random.default_rng(17)
    for _ in range(10):
        n0, n1 = int(rng.integers(5, 60)), int(rng.integers(5, 60))
        a = rng.normal(rng.uniform(-2, 2), rng.uniform(0.5, 3), n0)
        b = rng.normal(rng.uniform(-2, 2), rng.uniform(0.5, 3), n1)
        t, p = welch_ttest(a, b)
        t_ref, p_ref = stats.ttest_ind(a, b, equal_var=False)
        assert t == pytest.approx(float(t_ref), abs=1e-8)
        assert p == pytest.approx(float(p_ref), abs=1e-8)


def test_welch_table_one_separation():
    rng = np.random.default_rng(5)
    clean = rng.normal(28.26, 2.74, 500)
    hal = rng.normal(25.35, 2.70, 500)
    t, p = welch_ttest(clean, hal)
    assert t > 0
    assert p < 1e-10


def test_welch_symmetry():
    rng = np.random.default_rng(9)
    a = rng.normal(0, 1, 30)
    b = rng.normal(0.5, 2, 40)
    t_ab, p_ab = welch_ttest(a, b)
    t_ba, p_ba = welch_ttest(b, a)
    assert t_ab == pytest.approx(-t_ba, abs=1e-12)
    assert p_ab == pytest.approx(p_ba, abs=1e-12)


def test_welch_errors():
    with pytest.raises(ValueError):
        welch_ttest([1.0], [1.0, 2.0])
    with pytest.raises(DegenerateVarianceError):
        welch_ttest([2.0, 2.0, 2.0], [2.0, 2.0])


# -- threshold purity -----------------------------------------------------------------


def test_purity_perfect_separation():
    scored = [(40.0, 0), (38.0, 0), (10.0, 1), (12.0, 1)]
    assert threshold_purity(scored, 25.0) == (0.0, 0.0)


def test_purity_direct_counting():
    scored = [(35.0, 1), (35.0, 0), (20.0, 0), (20.0, 1)]
    above_32 = threshold_purity(scored, 32.0)
    assert above_32[0] == pytest.approx(0.5)
    below_23 = threshold_purity(scored, 23.0)
    assert below_23[1] == pytest.approx(0.5)


def test_purity_matches_recount_oracle():
    rng = np.random.default_rng(31)
    scored = [(float(rng.uniform(0, 50)), int(rng.integers(0, 2))) for _ in range(1000)]
    for threshold in (10.0, 23.0, 32.0, 45.0):
        above, below = threshold_purity(scored, threshold)
        above_items = [l for s, l in scored if s > threshold]
        below_items = [l for s, l in scored if s < threshold]
        assert above == (sum(above_items) / len(above_items) if above_items else None)
        assert below == (below_items.count(0) / len(below_items) if below_items else None)


def test_purity_undefined_side_marker():
    scored = [(40.0, 1), (39.0, 0)]
    above, below = threshold_purity(scored, 10.0)
    assert above == pytest.approx(0.5)
    assert below is None


# -- density export --------------------------------------------------------------------


def test_density_all_equal_scores_one_bin():
    rows = density_export([1.0, 1.0, 1.0], 2)
    assert len(rows) == 2
    assert sum(c for _, _, c, _ in rows) == 3
    assert sorted(c for _, _, c, _ in rows) == [0, 3]


def test_density_uniform_grid():
    scores = np.linspace(0, 99, 100)
    rows = density_export(scores, 10)
    assert [c for _, _, c, _ in rows] == [10] * 10


def test_density_matches_recount_oracle():
    rng = np.random.default_rng(41)
    scores = rng.normal(28, 3, 500)
    rows = density_export(scores, 13)
    assert sum(c for _, _, c, _ in rows) == 500
    # oracle: hand binning (last bin right-closed)
    lo, hi = scores.min(), scores.max()
    width = (hi - lo) / 13
    counts = [0] * 13
    for s in scores:
        idx = min(int((s - lo) / width), 12)
        counts[idx] += 1
    assert [c for _, _, c, _ in rows] == counts
    # density integrates to one
    assert sum(d * (hi_ - lo_) for lo_, hi_, _, d in rows) == pytest.approx(1.0, abs=1e-9)


def test_density_validates_inputs():
    with pytest.raises(ValueError):
        density_export([], 4)
    with pytest.raises(ValueError):
        density_export([1.0, 2.0], 1)


def test_histogram_csv_format(tmp_path):
    rows = density_export([1.0, 2.0, 3.0, 4.0], 2)
    path = tmp_path / "hist.csv"
    write_histogram_csv(path, rows)
    lines = path.read_text().splitlines()
    assert lines[0] == "bin_lo,bin_hi,count,density"
    assert len(lines) == 3
