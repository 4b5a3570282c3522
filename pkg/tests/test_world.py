import random

import pytest

from qrlab.corpus import build_index, retrieve_documents
from qrlab.metrics import precision_at_k
from qrlab.policy import render_prompt
from qrlab.world import (
    MockCompletionAdapter,
    WorldSpec,
    apply_map,
    gen_synthetic_world,
    load_world,
    save_world,
    split_dataset,
    teacher_rewrites,
    world_thesaurus,
)


def prec5(index, text, answers):
    return precision_at_k(retrieve_documents(index, text, 5), answers, 5)


def test_world_deterministic(world):
    again = gen_synthetic_world(WorldSpec())
    assert again.digest() == world.digest()
    assert gen_synthetic_world(WorldSpec(seed=1)).digest() != world.digest()


def test_world_shape(world):
    assert len(world.documents) == 200 and len(world.queries) == 200
    assert len({q.question for q in world.queries}) == 200
    surface = set(world.spec.obfuscation_map)
    for d in world.documents:
        assert not surface & set(d.text.split())


def test_world_self_check(world, world_index):
    wins = sum(prec5(world_index, world.gold_rewrites[q.query_id], q.answers)
               > prec5(world_index, q.question, q.answers) for q in world.queries)
    assert wins / len(world.queries) >= 0.9


def test_world_soundness_means(world, world_index):
    gold = [prec5(world_index, world.gold_rewrites[q.query_id], q.answers) for q in world.queries]
    orig = [prec5(world_index, q.question, q.answers) for q in world.queries]
    assert sum(gold) / len(gold) > sum(orig) / len(orig)


def test_every_query_reachable(world):
    for q in world.queries:
        assert any(q.answers[0] in d.body.split() for d in world.documents)


def test_single_relation_map():
    spec = WorldSpec(relation_map={"recipient": "winner"}, type_map={"squad": "team"}, relations_per_entity=1,
                     n_documents=60, n_queries=5, n_answer_words=None)
    w = gen_synthetic_world(spec)
    idx = build_index(w.documents)
    for q in w.queries:
        gold = w.gold_rewrites[q.query_id]
        assert gold == apply_map(q.question, {"recipient": "winner", "squad": "team"})
        assert "winner" in gold.split() and "recipient" in q.question.split()
        assert prec5(idx, gold, q.answers) > 0


def test_world_rejects_empty_map():
    with pytest.raises(ValueError):
        gen_synthetic_world(WorldSpec(relation_map={}))


def test_world_roundtrip(world, tmp_path):
    save_world(world, tmp_path)
    assert load_world(tmp_path).digest() == world.digest()


def test_thesaurus(world):
    th = world_thesaurus(world, n_distractors=20)
    mapping = world.spec.obfuscation_map
    assert all(th[k] == v for k, v in mapping.items())
    assert len(th) == len(mapping) + 20
    assert th == world_thesaurus(world, n_distractors=20)


# -- teacher ----------------------------------------------------------------------


def test_teacher_synthetic(world):
    recs = teacher_rewrites(world.queries[:30], 4, world=world)
    by_q = {}
    for r in recs:
        by_q.setdefault(r.query_id, []).append(r.rewrite)
        assert r.provenance == "teacher"
    for q in world.queries[:30]:
        rws = by_q[q.query_id]
        assert len(rws) <= 4 and len(set(rws)) == len(rws)
        assert q.question in rws  # identity
        assert world.gold_rewrites[q.query_id] == rws[0]


def test_teacher_n1_and_errors(world):
    recs = teacher_rewrites(world.queries[:5], 1, world=world)
    assert [r.rewrite for r in recs] == [world.gold_rewrites[q.query_id] for q in world.queries[:5]]
    with pytest.raises(ValueError):
        teacher_rewrites(world.queries[:5], 0, world=world)
    with pytest.raises(ValueError, match="synthetic"):
        teacher_rewrites(world.queries[:5], 2, mode="external")


def test_teacher_external_mock(world):
    qs = world.queries[:3]
    fixtures = {q.question: [f"rw one {i}", f"rw two {i}"] for i, q in enumerate(qs)}
    adapter = MockCompletionAdapter(fixtures)
    recs = teacher_rewrites(qs, 2, mode="external", adapter=adapter)
    assert [(r.original_query, r.rewrite) for r in recs] == [(q, rw) for q, v in fixtures.items() for rw in v]
    assert adapter.prompts[0] == render_prompt(qs[0].question)


# -- split ----------------------------------------------------------------------------


def test_split_by_query(world):
    recs = teacher_rewrites(world.queries[:100], 4, world=world)
    split = split_dataset(recs, 0.5, seed=3)
    assert sum(v == "sft" for v in split.values()) == 50
    assert split == split_dataset(recs, 0.5, seed=3)
    assert split != split_dataset(recs, 0.5, seed=4)
    assert set(split) == {r.query_id for r in recs}


def test_split_errors(world):
    recs = teacher_rewrites(world.queries[:1], 2, world=world)
    with pytest.raises(ValueError):
        split_dataset(recs, 0.5)
    with pytest.raises(ValueError):
        split_dataset(recs, 1.0)
