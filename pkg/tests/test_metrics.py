import itertools
import json
import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semsql.demo import DemoResponder
from semsql.errors import TooFewSamples
from semsql.llm import Gateway, RecordingProvider
from semsql.metrics import (
    complexity_histogram,
    compute_ser,
    contamination_filter,
    diversity,
    embed_offline,
    evaluate_corpus,
    executability,
    jaccard,
    judge_sa,
    load_eval_set,
    ngram_set,
    tokenize,
)

from conftest import worked_triple, make_triple, no_sleep

FOUR = [
    "SELECT sname FROM satscores;",
    "SELECT County FROM schools;",
    "SELECT COUNT(*) FROM schools JOIN satscores ON cds = CDSCode;",
    "SELECT nosuch FROM schools;",
]


def _brute(X):
    """Independent O(n^2) loop over pairs with math.dist."""
    rows = [list(map(float, r)) for r in X]
    n = len(rows)
    pairs = [math.dist(rows[i], rows[j]) for i, j in itertools.combinations(range(n), 2)]
    nn = [min(math.dist(rows[i], rows[j]) for j in range(n) if j != i) for i in range(n)]
    return sum(pairs) / len(pairs), sum(nn) / n


def test_ser_three_of_four(demo_db):
    assert compute_ser(FOUR, demo_db) == 0.75
    assert executability(FOUR, demo_db) == [True, True, True, False]


def test_ser_empty_rejected(demo_db):
    with pytest.raises(ValueError):
        compute_ser([], demo_db)


def _judge_gateway(responder):
    return Gateway(RecordingProvider(responder), sleep=no_sleep)


def test_sa_all_consistent(schema):
    corpus = [worked_triple(sample_id=f"s{i}") for i in range(3)]
    res = judge_sa(corpus, schema, _judge_gateway(DemoResponder(judge_label=1)))
    assert res.sa == 1.0 and res.subset_size == 3


def test_sa_only_over_executable_subset(schema):
    corpus = [worked_triple(sample_id=f"s{i}") for i in range(4)]
    seen = []

    def half(request):
        seen.append(request)
        return json.dumps({"label": len(seen) % 2, "reasoning": "r"})
    res = judge_sa(corpus, schema, _judge_gateway(half), [True, True, False, False], workers=1)
    assert res.subset_size == 2 and res.sa == 0.5 and len(seen) == 2
    assert "Database schema:" in seen[0].user_text


def test_sa_empty_subset_is_none(schema):
    res = judge_sa([worked_triple()], schema, _judge_gateway(DemoResponder()), [False])
    assert res.sa is None and res.subset_size == 0


def test_malformed_judge_reply_counts_zero(schema):
    res = judge_sa([worked_triple()], schema, _judge_gateway(lambda r: "no json here"))
    assert res.sa == 0.0 and "judge failure" in res.labels[0]["reasoning"]


# -- diversity ----------------------------------------------------------------

FIXTURES = [
    np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]),
    np.array([[1.0, 2.0, 3.0], [-1.0, 0.5, 4.0], [3.0, -2.0, 0.0], [0.1, 0.2, 0.3]]),
    np.array([[1.0, 1.0, 1.0], [1.0, 1.0, 1.0], [2.0, 2.0, 2.0]]),
]


@pytest.mark.parametrize("X", FIXTURES[1:])
def test_diversity_matches_brute_force(X):
    mean_l2, one_nn = diversity(X)
    want = _brute(X)
    assert abs(mean_l2 - want[0]) < 1e-9 and abs(one_nn - want[1]) < 1e-9


def test_zero_vectors_dropped():
    mean_l2, one_nn = diversity(FIXTURES[0])
    assert mean_l2 == pytest.approx(math.sqrt(5)) and one_nn == pytest.approx(math.sqrt(5))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.floats(-100, 100), min_size=3, max_size=3), min_size=2, max_size=8))
def test_diversity_property_vs_brute(rows):
    X = np.array(rows)
    X = X[np.linalg.norm(X, axis=1) > 0]
    if len(X) < 2:
        return
    mean_l2, one_nn = diversity(X)
    want = _brute(X)
    assert mean_l2 == pytest.approx(want[0], abs=1e-7)
    assert one_nn == pytest.approx(want[1], abs=1e-7)
    assert 0 <= one_nn <= max(want[0] * len(X), 1e-12)
    perm = np.random.default_rng(0).permutation(len(X))
    assert diversity(X[perm]) == pytest.approx((mean_l2, one_nn))


def test_disjoint_trigrams_are_sqrt2_apart():
    a, b = "aaaa", "bbbb"
    assert np.dot(embed_offline(a), embed_offline(b)) == 0.0
    assert diversity([a, b]) == pytest.approx((math.sqrt(2), math.sqrt(2)))


def test_identical_sql_zero_distance():
    assert diversity(["SELECT 1 FROM t", "SELECT 1 FROM t"]) == (0.0, 0.0)


def test_embedding_normalized_and_stable():
    v = embed_offline("SELECT sname FROM satscores")
    assert v.shape == (256,) and np.linalg.norm(v) == pytest.approx(1.0)
    assert np.array_equal(v, embed_offline("SELECT sname FROM satscores"))
    assert not embed_offline("ab").any()


def test_too_few_samples():
    with pytest.raises(TooFewSamples):
        diversity(["SELECT 1"])
    with pytest.raises(TooFewSamples):
        diversity(["SELECT a FROM t", "xy"])


def test_provider_embedder_used():
    calls = []

    def fake(texts):
        calls.append(texts)
        return np.eye(len(texts))
    assert diversity(["a", "b", "c"], embedder=fake) == pytest.approx((math.sqrt(2), math.sqrt(2)))
    assert calls == [["a", "b", "c"]]


# -- contamination filter -----------------------------------------------------

def test_tokenize_folds_case_and_splits_punctuation():
    assert tokenize("SELECT a.b, COUNT(*) FROM T;") == ["select", "a", "b", "count", "from", "t"]


def test_short_text_single_gram():
    assert ngram_set("one two", 8) == frozenset({("one", "two")})
    assert jaccard(frozenset(), frozenset()) == 0.0


def _vocab_sentence(rng, vocab, k=20):
    return " ".join(rng.choice(vocab) for _ in range(k))


def _planted_corpus():
    rng = random.Random(11)
    vocab = [f"w{i}" for i in range(5000)]
    eval_set = [(_vocab_sentence(rng, vocab), f"SELECT c{i} FROM t{i}") for i in range(30)]
    corpus = []
    planted = set()
    for i in range(100):
        if i % 20 == 3:
            q = eval_set[i // 20][0].split()
            q[-1] = "changed"
            question = " ".join(q)
            planted.add(f"s{i:03d}")
        else:
            question = _vocab_sentence(rng, vocab)
        corpus.append(make_triple(f"SELECT x{i} FROM y", ["y"], question=question))
        corpus[-1].sample_id = f"s{i:03d}"
    return corpus, eval_set, planted


def test_filter_removes_exactly_planted():
    corpus, eval_set, planted = _planted_corpus()
    kept, removed = contamination_filter(corpus, eval_set, 8, 0.6)
    assert {r.sample_id for r in removed} == planted and len(removed) == 5
    assert len(kept) == 95
    for r in removed:
        assert r.field == "question" and r.score > 0.6
        assert r.eval_index == int(r.sample_id[1:]) // 20


def test_filter_matches_brute_force_scores():
    corpus, eval_set, planted = _planted_corpus()
    brute = {t.sample_id for t in corpus
             if any(jaccard(ngram_set(t.question, 8), ngram_set(q, 8)) > 0.6 or
                    jaccard(ngram_set(t.sql, 8), ngram_set(s, 8)) > 0.6 for q, s in eval_set)}
    assert brute == planted


def test_identical_removed_disjoint_kept():
    same = worked_triple()
    other = make_triple("SELECT County FROM schools", ["schools"], question="Totally unrelated words here")
    other.sample_id = "other"
    kept, removed = contamination_filter([same, other], [(same.question, same.sql)])
    assert [t.sample_id for t in kept] == ["other"]
    assert removed[0].score == 1.0


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 0.99), st.floats(0.0, 0.99))
def test_threshold_monotone(t1, t2):
    lo, hi = sorted((t1, t2))
    corpus, eval_set, _ = _planted_corpus()
    kept_lo, _ = contamination_filter(corpus, eval_set, 8, lo)
    kept_hi, _ = contamination_filter(corpus, eval_set, 8, hi)
    assert {t.sample_id for t in kept_lo} <= {t.sample_id for t in kept_hi}


def test_filter_rejects_tiny_n():
    with pytest.raises(ValueError):
        contamination_filter([], [], n=1)


def test_load_eval_set_formats(tmp_path):
    jl = tmp_path / "e.jsonl"
    jl.write_text('{"question": "a", "query": "SELECT 1"}\n\n{"question": "b", "SQL": "SELECT 2"}\n')
    js = tmp_path / "e.json"
    js.write_text(json.dumps([{"question": "c", "sql": "SELECT 3"}]))
    assert load_eval_set(jl) == [("a", "SELECT 1"), ("b", "SELECT 2")]
    assert load_eval_set(js) == [("c", "SELECT 3")]


# -- report -------------------------------------------------------------------

def test_histogram_totals_parseable(schema):
    corpus = FOUR + ["SELEC nope"]
    hist = complexity_histogram(corpus, schema)
    assert sum(hist.values()) == 4 and hist["L1"] == 3 and hist["L2"] == 1


def test_evaluate_corpus_report(demo_db, schema):
    corpus = [make_triple(s, []) for s in FOUR]
    for i, t in enumerate(corpus):
        t.sample_id = f"s{i}"
    report = evaluate_corpus(corpus, demo_db, schema)
    assert report.ser == 0.75 and report.n_executable == 3 and report.sa is None
    assert report.n_samples == 4 and report.mean_l2 is not None
    assert "SER" in report.to_table()
