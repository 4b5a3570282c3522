"""Retrieval statistics of the synthetic world and its teacher labels.

Reports how often the gold rewrite beats the raw query at Prec@5 (the world
self-check) and the mean Prec@5 of good-labeled rewrites, original queries
and bad-labeled rewrites on the feedback split.

    python scripts/world_report.py [--seed 0] [--config configs/default.yaml]
"""

import argparse
import json
from pathlib import Path

import numpy as np

from qrlab.config import load_config
from qrlab.corpus import build_index, retrieve_documents
from qrlab.metrics import precision_at_k
from qrlab.reranker import GOOD, TfidfScorer, build_feedback_dataset
from qrlab.world import gen_synthetic_world, split_dataset, teacher_rewrites


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", type=Path, default=None)
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args()
    cfg = load_config(args.config, args.seed)
    world = gen_synthetic_world(cfg.world)
    index = build_index(world.documents)
    answers = {q.query_id: q.answers for q in world.queries}

    def p5(text: str, qid: str) -> float:
        return precision_at_k(retrieve_documents(index, text, 5), answers[qid], 5)

    gold = [p5(world.gold_rewrites[q.query_id], q.query_id) for q in world.queries]
    orig = [p5(q.question, q.query_id) for q in world.queries]
    recs = teacher_rewrites(world.queries, cfg.teacher.n_per_query, world=world, seed=cfg.seed)
    split = split_dataset(recs, cfg.teacher.sft_fraction, cfg.seed)
    fb = [r for r in recs if split[r.query_id] == "feedback"]
    ds = build_feedback_dataset(fb, index, TfidfScorer(index, world.spec.obfuscation_map), cfg.score.k,
                                cfg.score.max_pairs_per_query)
    good = [p5(r.rewrite, r.query_id) for r in ds.kto_examples if r.label == GOOD]
    bad = [p5(r.rewrite, r.query_id) for r in ds.kto_examples if r.label != GOOD]
    fb_orig = [p5(q, qid) for qid, q in sorted({(r.query_id, r.original_query) for r in fb})]
    print(json.dumps({
        "documents": len(world.documents),
        "queries": len(world.queries),
        "gold_beats_query": round(float(np.mean([g > o for g, o in zip(gold, orig)])), 4),
        "gold_prec5": round(float(np.mean(gold)), 4),
        "query_prec5": round(float(np.mean(orig)), 4),
        "mu": round(ds.mu, 4),
        "pairs": len(ds.pairs),
        "good_prec5": round(float(np.mean(good)), 4),
        "feedback_query_prec5": round(float(np.mean(fb_orig)), 4),
        "bad_prec5": round(float(np.mean(bad)), 4),
    }, indent=2))


if __name__ == "__main__":
    main()
