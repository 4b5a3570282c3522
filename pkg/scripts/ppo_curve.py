"""Train SFT then PPO on the feedback split and summarize the reward curve.

Prints mean terminal score per 50-step window and the last-50 / first-50
ratio, for one or more seeds.

    python scripts/ppo_curve.py --seeds 0 1 --batch 8 --steps 1000
"""

import argparse
import dataclasses
import json
import time

import numpy as np

from qrlab.config import LabConfig, config_from_dict
from qrlab.corpus import build_index
from qrlab.pipeline import lab_vocabulary
from qrlab.reranker import TfidfScorer
from qrlab.training import pretrain_base, run_ppo, run_sft
from qrlab.world import gen_synthetic_world, split_dataset, teacher_rewrites, world_thesaurus


def curve_for(cfg: LabConfig, batch: int, steps: int) -> dict:
    world = gen_synthetic_world(cfg.world)
    index = build_index(world.documents)
    scorer = TfidfScorer(index, world.spec.obfuscation_map)
    thesaurus = world_thesaurus(world, cfg.base.n_distractors, cfg.seed)
    vocab = lab_vocabulary(world, thesaurus, cfg.policy.vocab_max_size)
    base = pretrain_base(vocab, thesaurus, cfg.pretrain, **cfg.policy.arch())
    recs = teacher_rewrites(world.queries, cfg.teacher.n_per_query, world=world, seed=cfg.seed)
    split = split_dataset(recs, cfg.teacher.sft_fraction, cfg.seed)
    sft, _ = run_sft(cfg.train, [(r.original_query, r.rewrite) for r in recs if split[r.query_id] == "sft"], base)
    queries = sorted({r.original_query for r in recs if split[r.query_id] == "feedback"})
    t0 = time.perf_counter()
    train = dataclasses.replace(cfg.train, ppo_batch=batch, ppo_steps=steps)
    _, curve = run_ppo(train, queries, sft, index, scorer)
    c = np.asarray(curve)
    return {
        "seed": cfg.seed,
        "first50": round(float(c[:50].mean()), 4),
        "last50": round(float(c[-50:].mean()), 4),
        "ratio": round(float(c[-50:].mean() / c[:50].mean()), 4),
        "windows": [round(float(c[i : i + 50].mean()), 4) for i in range(0, len(c), 50)],
        "ppo_seconds": round(time.perf_counter() - t0, 1),
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--steps", type=int, default=1000)
    args = ap.parse_args()
    for seed in args.seeds:
        print(json.dumps(curve_for(config_from_dict({}, seed), args.batch, args.steps)))


if __name__ == "__main__":
    main()
