import itertools
import math
import warnings

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qrlab.corpus import Document, build_index, retrieve_documents
from qrlab.metrics import precision_at_k
from qrlab.reranker import (
    BAD,
    GOOD,
    CallableScorer,
    EmptyTextWarning,
    FeedbackDataset,
    RewriteRecord,
    ScaledScorer,
    TfidfScorer,
    build_feedback_dataset,
    build_preference_pairs,
    compute_threshold,
    label_rewrites,
    load_feedback_dataset,
    load_records,
    precision_feedback_labels,
    rank_documents,
    save_feedback_dataset,
    save_records,
    score_records,
    score_rewrite,
)


class FixedScorer:
    """Scores looked up by doc_id, ignoring the query."""

    def __init__(self, table, default=0.0):
        self.table, self.default = table, default

    def score(self, query, document):
        return self.table.get(document.doc_id, self.default)


def rec(qid, rw, score=None, label=None):
    return RewriteRecord(qid, f"query {qid}", rw, "teacher", score, label)


# -- pair scoring ------------------------------------------------------------


def test_cosine_identical_and_disjoint(small_index):
    sc = TfidfScorer(small_index)
    d = small_index.get("d3")
    assert sc.score(d.text, d) == pytest.approx(1.0)
    assert sc.score("orchard pear", small_index.get("d3")) == 0.0


def test_cosine_hand_case():
    docs = [Document("a", "", "tall building"), Document("b", "", "tower"), Document("c", "", "tall"),
            Document("d", "", "short hut")]
    idx = build_index(docs)
    sc = TfidfScorer(idx)
    idf = {t: math.log((4 - n + 0.5) / (n + 0.5) + 1) for t, n in (("tall", 2), ("tower", 1), ("building", 1))}
    q = {"tall": idf["tall"], "tower": idf["tower"]}
    dv = {"tall": idf["tall"], "building": idf["building"]}
    expect = q["tall"] * dv["tall"] / (math.hypot(*q.values()) * math.hypot(*dv.values()))
    assert sc.score("tall tower", docs[0]) == pytest.approx(expect, abs=1e-12)


def test_cosine_empty_warns(small_index):
    sc = TfidfScorer(small_index)
    with pytest.warns(EmptyTextWarning):
        assert sc.score("...", small_index.get("d1")) == 0.0


def test_synonyms_canonicalize(small_index):
    plain = TfidfScorer(small_index)
    syn = TfidfScorer(small_index, {"hedgehog": "porcupine"})
    d = small_index.get("d3")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert plain.score("hedgehog", d) == 0.0
    assert syn.score("hedgehog", d) > 0.0


def test_callable_scorer_rejects_nan(small_index):
    with pytest.raises(ValueError):
        CallableScorer(lambda q, t: float("nan")).score("q", small_index.get("d1"))


@settings(max_examples=40)
@given(st.lists(st.sampled_from("apple pie tree orchard pear rodent quills".split()), min_size=1, max_size=5))
def test_score_in_unit_interval(small_index, words):
    sc = TfidfScorer(small_index)
    for d in small_index.iter_documents():
        assert 0.0 <= sc.score(" ".join(words), d) <= 1.0


# -- rewrite score -------------------------------------------------------------


def test_score_rewrite_mean(small_index):
    table = {"d1": 0.2, "d2": 0.4, "d4": 0.6}
    hits = [d.doc_id for d in retrieve_documents(small_index, "apple orchard trees", 3)]
    assert sorted(hits) == ["d1", "d2", "d4"]
    s = score_rewrite("orig", "apple orchard trees", small_index, FixedScorer(table), k=3)
    assert s.value == pytest.approx(0.4, abs=1e-12)
    assert not s.empty_retrieval


def test_score_rewrite_constant(small_index):
    s = score_rewrite("orig", "apple", small_index, FixedScorer({}, default=0.7), k=5)
    assert s.value == pytest.approx(0.7)


def test_score_rewrite_empty(small_index):
    s = score_rewrite("orig", "zebra", small_index, FixedScorer({}, 1.0), k=5)
    assert s.value == 0.0 and s.empty_retrieval


def test_score_rewrite_uses_original_query(small_index):
    sc = TfidfScorer(small_index)
    a = score_rewrite("porcupine quills", "apple", small_index, sc, 2)
    b = score_rewrite("apple pie", "apple", small_index, sc, 2)
    assert a.doc_ids == b.doc_ids and a.value < b.value


# -- threshold and labels ------------------------------------------------------


def test_threshold_examples():
    recs = [rec("q", f"r{i}", s) for i, s in enumerate([0.1, 0.3, 0.5, 0.7])]
    assert compute_threshold(recs) == pytest.approx(0.4)
    assert compute_threshold([rec("q", "r", 0.9)]) == 0.9
    with pytest.raises(ValueError):
        compute_threshold([])
    with pytest.raises(ValueError):
        compute_threshold([rec("q", "r")])


@given(st.lists(st.floats(0, 1), min_size=10, max_size=10))
def test_threshold_matches_bruteforce(scores):
    recs = [rec("q", f"r{i}", s) for i, s in enumerate(scores)]
    total = 0.0
    for s in scores:
        total += s
    assert abs(compute_threshold(recs) - total / 10) <= 1e-12


def test_label_boundary():
    out = label_rewrites([rec("q", "a", 0.41), rec("q", "b", 0.4)], 0.4)
    assert [r.label for r in out] == [GOOD, BAD]
    same = [rec("q", f"r{i}", 0.3) for i in range(4)]
    assert all(r.label == BAD for r in label_rewrites(same, compute_threshold(same)))


@settings(max_examples=50)
@given(st.lists(st.floats(0.01, 1), min_size=2, max_size=12), st.floats(0.1, 10))
def test_labels_scale_invariant(scores, c):
    recs = [rec(f"q{i % 3}", f"r{i}", s) for i, s in enumerate(scores)]
    scaled = [rec(r.query_id, r.rewrite, r.score * c) for r in recs]
    l1 = [r.label for r in label_rewrites(recs, compute_threshold(recs))]
    l2 = [r.label for r in label_rewrites(scaled, compute_threshold(scaled))]
    assert l1 == l2


def test_record_validation():
    with pytest.raises(ValueError):
        RewriteRecord("q", "orig", "  ")
    with pytest.raises(ValueError):
        RewriteRecord("q", "orig", "r", "human")
    with pytest.raises(ValueError):
        RewriteRecord("q", "orig", "r", label=GOOD)


# -- pairs ------------------------------------------------------------------------


def test_pairs_cross_product():
    recs = [rec("q", "g1", 0.9, GOOD), rec("q", "b1", 0.1, BAD), rec("q", "b2", 0.2, BAD)]
    ds = build_preference_pairs(recs, 0.5)
    assert {(p.good_rewrite, p.bad_rewrite) for p in ds.pairs} == {("g1", "b1"), ("g1", "b2")}


def test_pairs_all_good():
    recs = [rec("q", f"g{i}", 0.9, GOOD) for i in range(3)]
    ds = build_preference_pairs(recs, 0.5)
    assert ds.pairs == [] and ds.n_good == 3 and ds.n_bad == 0


def test_pair_cap_enumeration():
    goods = [0.97, 0.81, 0.62]
    bads = [0.05, 0.28, 0.44]
    recs = [rec("q", f"g{i}", s, GOOD) for i, s in enumerate(goods)]
    recs += [rec("q", f"b{i}", s, BAD) for i, s in enumerate(bads)]
    ds = build_preference_pairs(recs, 0.5, max_pairs_per_query=4)
    gaps = sorted(((g - b), f"g{i}", f"b{j}") for (i, g), (j, b)
                  in itertools.product(enumerate(goods), enumerate(bads)))[::-1]
    expect = {(gi, bj) for _, gi, bj in gaps[:4]}
    assert {(p.good_rewrite, p.bad_rewrite) for p in ds.pairs} == expect
    assert len(ds.pairs) == 4


def test_pair_invariants_on_world(world, world_index):
    from qrlab.world import teacher_rewrites

    recs = teacher_rewrites(world.queries[:40], 4, world=world)
    ds = build_feedback_dataset(recs, world_index, TfidfScorer(world_index, world.spec.obfuscation_map), k=3)
    assert ds.n_good + ds.n_bad == len(ds.kto_examples) == len(recs)
    kto = {(r.query_id, r.rewrite) for r in ds.kto_examples}
    for p in ds.pairs:
        assert p.good_score > ds.mu >= p.bad_score
        assert p.good_rewrite != p.bad_rewrite
        assert (p.query_id, p.good_rewrite) in kto and (p.query_id, p.bad_rewrite) in kto
    per_q = {}
    for p in ds.pairs:
        per_q[p.query_id] = per_q.get(p.query_id, 0) + 1
    assert max(per_q.values()) <= 4


def test_pairs_require_labels():
    with pytest.raises(ValueError):
        build_preference_pairs([rec("q", "a", 0.2)], 0.1)


# -- ranking --------------------------------------------------------------------


def test_rank_documents():
    docs = [Document("a", "", "x"), Document("b", "", "y"), Document("c", "", "z")]
    out = rank_documents("q", docs, FixedScorer({"a": 0.9, "b": 0.1, "c": 0.5}))
    assert out.doc_ids == ["a", "c", "b"]
    dup = rank_documents("q", docs + [docs[0]], FixedScorer({"a": 0.9}))
    assert sorted(dup.doc_ids) == ["a", "b", "c"]
    tie = rank_documents("q", list(reversed(docs)), FixedScorer({}, 0.5))
    assert tie.doc_ids == ["a", "b", "c"]
    scores = [e.score for e in out.entries]
    assert scores == sorted(scores, reverse=True)


# -- precision labels -------------------------------------------------------------


def test_precision_labels_examples():
    docs = [Document(f"d{i}", "", t) for i, t in enumerate(
        ["ans foo", "ans foo", "ans foo", "bar", "bar baz", "baz"])]
    idx = build_index(docs)
    recs = [RewriteRecord("q", "baz", "foo"), RewriteRecord("q", "baz", "baz")]
    out = precision_feedback_labels(recs, idx, {"q": ["ans"]}, k=5)
    assert out[0].label == GOOD and out[0].score == pytest.approx(0.6)
    assert out[1].label == BAD  # same retrieval as the original
    with pytest.raises(ValueError):
        precision_feedback_labels(recs, idx, {}, k=5)


def test_precision_labels_match_bruteforce(world, world_index):
    import random

    from qrlab.world import teacher_rewrites

    qs = random.Random(3).sample(world.queries, 20)
    recs = teacher_rewrites(qs, 4, world=world)
    answers = {q.query_id: q.answers for q in qs}
    out = precision_feedback_labels(recs, world_index, answers, k=5)
    for r in out:
        base = precision_at_k(retrieve_documents(world_index, r.original_query, 5), answers[r.query_id], 5)
        mine = precision_at_k(retrieve_documents(world_index, r.rewrite, 5), answers[r.query_id], 5)
        assert r.label == (GOOD if mine > base else BAD)


# -- persistence ----------------------------------------------------------------------


def test_feedback_roundtrip(tmp_path):
    recs = [rec("q1", "g", 0.9, GOOD), rec("q1", "b", 0.1, BAD), rec("q2", "x", 0.4, BAD)]
    ds = build_preference_pairs(recs, 0.5)
    paths = save_feedback_dataset(ds, tmp_path)
    import json

    row = json.loads(paths["pairs"].read_text().splitlines()[0])
    assert set(row) == {"query_id", "query", "good", "bad", "good_score", "bad_score"}
    meta = json.loads(paths["meta"].read_text())
    assert meta == {"mu": 0.5, "n_pairs": 1, "n_good": 1, "n_bad": 2}
    back = load_feedback_dataset(tmp_path)
    assert back.pairs == ds.pairs and back.kto_examples == ds.kto_examples and back.mu == ds.mu


def test_records_roundtrip(tmp_path):
    recs = [rec("q1", "g", 0.9, GOOD), rec("q1", "b")]
    save_records(recs, tmp_path / "r.jsonl")
    assert load_records(tmp_path / "r.jsonl") == recs


def test_score_records_and_scaled(small_index):
    recs = [rec("q", "apple"), rec("q", "porcupine")]
    sc = TfidfScorer(small_index)
    a = score_records(recs, small_index, sc, 2)
    b = score_records(recs, small_index, ScaledScorer(sc, 3.0), 2)
    for x, y in zip(a, b):
        assert y.score == pytest.approx(3 * x.score)
