import random

import pytest
import torch

from conftest import make_tiny
from qrlab.corpus import Document, retrieve_documents
from qrlab.evaluation import (
    METRICS,
    UNKNOWN,
    EvalReport,
    EvalSetting,
    assemble_context,
    evaluate,
    evaluate_rewrites,
    oracle_answer,
)
from qrlab.metrics import contains_answer, exact_match, mrr, precision_at_k, rouge_l
from qrlab.policy import GenerationConfig, PolicyCheckpoint, build_vocabulary, new_policy, render_prompt
from qrlab.reranker import TfidfScorer
from qrlab.world import QueryRecord, teacher_rewrites

import oracles


def D(*ids):
    return [Document(i, "", f"text {i}") for i in ids]


class FixedScorer:
    def __init__(self, table):
        self.table = table

    def score(self, query, document):
        return self.table.get(document.doc_id, 0.0)


EXPAND_RAW = EvalSetting("expand", "raw", k=5)


def test_setting_validation():
    with pytest.raises(ValueError):
        EvalSetting("both")
    with pytest.raises(ValueError):
        EvalSetting(order="sorted")
    with pytest.raises(ValueError):
        EvalSetting(k=0)
    with pytest.raises(ValueError):
        EvalSetting("expand", num_rewrites=0)
    assert EvalSetting("oqr").rewrites_needed == 0
    assert EvalSetting("substitute").rewrites_needed == 1
    assert EvalSetting("expand", num_rewrites=3).rewrites_needed == 3


def test_round_robin_example():
    ctx = assemble_context(EXPAND_RAW, D("a1", "a2"), [D("b1"), D("c1", "c2")], None, "q")
    assert ctx.doc_ids == ["a1", "b1", "c1", "a2", "c2"]


def test_round_robin_duplicate():
    ctx = assemble_context(EXPAND_RAW, D("a1", "a2"), [D("a1"), D("c1", "c2")], None, "q")
    assert ctx.doc_ids == ["a1", "c1", "a2", "c2"]


def test_round_robin_stops_at_k():
    ctx = assemble_context(EvalSetting("expand", "raw", k=3), D("a1", "a2"), [D("b1", "b2")], None, "q")
    assert ctx.doc_ids == ["a1", "b1", "a2"]


def test_ranked_sorted_by_scorer():
    sc = FixedScorer({"c2": 0.9, "a1": 0.8, "b1": 0.5, "a2": 0.1})
    ctx = assemble_context(EvalSetting("expand", "ranked", k=3), D("a1", "a2"), [D("b1"), D("c1", "c2")], sc, "q")
    assert ctx.doc_ids == ["c2", "a1", "b1"]


def test_substitute_and_oqr():
    sub = EvalSetting("substitute", "raw", k=2)
    assert assemble_context(sub, D("a1"), [D("b1", "b2", "b3")], None, "q").doc_ids == ["b1", "b2"]
    with pytest.raises(ValueError):
        assemble_context(sub, D("a1"), [D("b1"), D("c1")], None, "q")
    oqr = EvalSetting("oqr", "raw", k=2)
    assert assemble_context(oqr, D("a1", "a2", "a3"), [D("b1")], None, "q").doc_ids == ["a1", "a2"]


def test_empty_context_flag():
    ctx = assemble_context(EXPAND_RAW, [], [[], []], None, "q")
    assert ctx.empty and ctx.doc_ids == []


def test_oracle_answer():
    docs = [Document("1", "", "nothing here"), Document("2", "", "the eiffel tower stands")]
    assert oracle_answer(docs, ["Eiffel Tower"]) == "Eiffel Tower"
    assert exact_match(oracle_answer(docs, ["Eiffel Tower"]), ["Eiffel Tower"]) == 1
    assert oracle_answer(docs[:1], ["Eiffel Tower"]) == UNKNOWN


def test_false_premise_routing(small_index):
    q = QueryRecord("fp", "apple orchard", ["there is no such orchard"], is_false_premise=True)
    rep = evaluate_rewrites([q], {}, small_index, None, EvalSetting("oqr"))
    row = rep.rows[0]
    assert row["prediction"] == UNKNOWN
    assert row["rouge_l"] == rouge_l(UNKNOWN, q.answers)
    assert row["prec@k"] == 0.0 and row["mrr"] == 0.0


def test_oqr_ignores_policy(world, world_index):
    qs = world.queries[:20]
    sc = TfidfScorer(world_index)
    a = evaluate(None, qs, world_index, sc, EvalSetting("oqr"))
    v = build_vocabulary([render_prompt("")] + world.texts(), 200)
    ck = PolicyCheckpoint(new_policy(v, seed=4, d_model=8, n_layers=1, n_heads=2, context_length=64), v)
    b = evaluate(ck, qs, world_index, sc, EvalSetting("oqr"))
    assert a.to_json() == b.to_json()
    with pytest.raises(ValueError):
        evaluate(None, qs, world_index, sc, EvalSetting("expand"))


def test_vocab_mismatch_rejected(world, world_index, tiny_vocab):
    model = make_tiny(tiny_vocab)
    bigger = build_vocabulary([render_prompt("")] + world.texts(), 200)
    with pytest.raises(ValueError, match="vocabulary"):
        evaluate(PolicyCheckpoint(model, bigger), world.queries[:2], world_index, None, EXPAND_RAW)


def test_evaluate_deterministic(world, world_index):
    v = build_vocabulary([render_prompt("")] + world.texts(), 200)
    ck = PolicyCheckpoint(new_policy(v, seed=1, d_model=8, n_layers=1, n_heads=2, context_length=64), v)
    gen = GenerationConfig(temperature=1.0, max_new_tokens=4, seed=5)
    a = evaluate(ck, world.queries[:10], world_index, None, EXPAND_RAW, gen)
    b = evaluate(ck, world.queries[:10], world_index, None, EXPAND_RAW, gen)
    assert a.to_json() == b.to_json()


@pytest.fixture(scope="module")
def teacher_report(world, world_index):
    qs = random.Random(0).sample(world.queries, 50)
    recs = teacher_rewrites(qs, 3, world=world)
    rws = {}
    for r in recs:
        if r.rewrite != r.original_query:
            rws.setdefault(r.query_id, []).append(r.rewrite)
    sc = TfidfScorer(world_index, world.spec.obfuscation_map)
    return qs, rws, evaluate_rewrites(qs, rws, world_index, sc, EXPAND_RAW)


def test_aggregates_equal_recomputed_means(world, world_index, teacher_report):
    qs, rws, rep = teacher_report
    docs = {d.doc_id: d for d in world.documents}
    precs = []
    for q, row in zip(qs, rep.rows):
        ctx = [docs[i] for i in row["doc_ids"]]
        texts = [d.text for d in ctx]
        precs.append(oracles.precision(texts, q.answers, 5))
        assert abs(row["prec@k"] - precs[-1]) <= 1e-12
        assert abs(row["mrr"] - oracles.mrr(texts, q.answers)) <= 1e-12
    assert abs(rep.metrics["prec@k"] - sum(precs) / len(precs)) <= 1e-12
    for m in METRICS:
        assert 0.0 <= rep.metrics[m] <= 1.0


def test_expand_raw_contains_top_original(world, world_index, teacher_report):
    qs, _, rep = teacher_report
    for q, row in zip(qs, rep.rows):
        top = retrieve_documents(world_index, q.question, 1)
        if top:
            assert top[0].doc_id in row["doc_ids"]


def test_ranked_ceiling_with_containment_scorer(world, world_index, teacher_report):
    qs, rws, raw = teacher_report
    answers = {q.question: q.answers for q in qs}

    class Containment:
        def score(self, query, document):
            return float(contains_answer(document, answers[query]))

    ranked = evaluate_rewrites(qs, rws, world_index, Containment(), EvalSetting("expand", "ranked"))
    for a, b in zip(ranked.rows, raw.rows):
        assert a["prec@k"] >= b["prec@k"]


def test_report_roundtrip(tmp_path, teacher_report):
    _, _, rep = teacher_report
    json_path, csv_path = rep.save(tmp_path / "r.json")
    back = EvalReport.load(json_path)
    assert back.to_json() == rep.to_json()
    lines = csv_path.read_text().splitlines()
    assert len(lines) == len(rep.rows) + 1 and lines[0].startswith("query_id,")
