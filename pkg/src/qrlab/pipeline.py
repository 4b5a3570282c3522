"""Staged workflow: world -> index -> teacher -> base -> sft -> score -> feedback -> eval.

Every stage reads the files its predecessors declared in the run manifest and
records sha256 hashes of what it writes. A stage whose inputs, outputs and
config slice still hash the same is skipped.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch

from .config import LabConfig
from .corpus import SearchIndex, build_index, load_index, save_index
from .evaluation import METRICS, EvalReport, EvalSetting, evaluate
from .policy import (
    PolicyCheckpoint,
    Vocabulary,
    build_vocabulary,
    load_checkpoint,
    new_policy,
    render_prompt,
    save_checkpoint,
)
from .reranker import (
    TfidfScorer,
    build_feedback_dataset,
    load_feedback_dataset,
    load_records,
    save_feedback_dataset,
    save_records,
)
from .training import pretrain_base, run_offline, run_ppo, run_sft
from .world import (
    MockCompletionAdapter,
    World,
    gen_synthetic_world,
    load_world,
    save_world,
    split_dataset,
    teacher_rewrites,
    world_thesaurus,
)

log = logging.getLogger(__name__)

STAGES = ("world", "index", "teacher", "base", "sft", "score",
          "feedback-dpo", "feedback-kto", "feedback-ppo", "eval")
DEFAULT_CHAIN = ("world", "index", "teacher", "base", "sft", "score", "feedback-kto", "eval")
FEEDBACK_CKPTS = {"feedback-dpo": "dpo", "feedback-kto": "kto", "feedback-ppo": "ppo"}

WORLD_FILES = ("world/documents.jsonl", "world/queries.jsonl", "world/gold_rewrites.jsonl", "world/world.json")

# stage -> (config sections it depends on, upstream stages it reads from)
_DEPS: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = {
    "world": (("world",), ()),
    "index": ((), ("world",)),
    "teacher": (("teacher",), ("world",)),
    "base": (("policy", "base", "pretrain"), ("world",)),
    "sft": (("train",), ("base", "teacher")),
    "score": (("score",), ("index", "teacher", "world")),
    "feedback-dpo": (("train",), ("sft", "score")),
    "feedback-kto": (("train",), ("sft", "score")),
    "feedback-ppo": (("train", "score"), ("sft", "index", "teacher", "world")),
    "eval": (("eval", "score"), ("index", "teacher", "world", "sft")),
}


class MissingArtifact(RuntimeError):
    pass


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_obj(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


@dataclass
class StageRecord:
    config_hash: str
    inputs: dict[str, str]
    outputs: dict[str, str]
    wall_clock: float


@dataclass
class RunManifest:
    out_dir: str
    config: dict
    seed: int
    stages: dict[str, StageRecord] = field(default_factory=dict)

    @property
    def path(self) -> Path:
        return Path(self.out_dir) / "manifest.json"

    def save(self) -> Path:
        Path(self.out_dir).mkdir(parents=True, exist_ok=True)
        payload = {"config": self.config, "seed": self.seed,
                   "stages": {k: asdict(v) for k, v in sorted(self.stages.items())}}
        self.path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return self.path

    @classmethod
    def open(cls, out_dir: str | Path, cfg: LabConfig) -> "RunManifest":
        """Load the manifest in ``out_dir`` (or start one) and attach the current config."""
        path = Path(out_dir) / "manifest.json"
        stages = {}
        if path.exists():
            raw = json.loads(path.read_text(encoding="utf-8"))
            stages = {k: StageRecord(**v) for k, v in raw.get("stages", {}).items()}
        return cls(str(out_dir), cfg.to_dict(), cfg.seed, stages)

    def output(self, stage: str, name: str) -> Path:
        rec = self.stages.get(stage)
        if rec is None or name not in rec.outputs:
            raise MissingArtifact(f"missing {name}: run stage '{stage}' first")
        p = Path(self.out_dir) / name
        if not p.exists():
            raise MissingArtifact(f"{p} is gone: rerun stage '{stage}'")
        return p


# -- shared loaders -----------------------------------------------------------


def _scorer(cfg: LabConfig, index: SearchIndex, world: World) -> TfidfScorer:
    return TfidfScorer(index, world.spec.obfuscation_map if cfg.score.synonyms else None)


def _world(m: RunManifest) -> World:
    m.output("world", "world/world.json")
    return load_world(Path(m.out_dir) / "world")


def _split(m: RunManifest) -> dict[str, str]:
    return json.loads(m.output("teacher", "split.json").read_text(encoding="utf-8"))


def lab_vocabulary(world: World, thesaurus: dict[str, str], max_size: int) -> Vocabulary:
    """Policy vocabulary over the world texts, the prompt template and the thesaurus.

    Thesaurus words join the corpus so a small world still covers every mapped term.
    """
    extra = [render_prompt(""), " ".join(list(thesaurus) + list(thesaurus.values()))]
    return build_vocabulary(world.texts() + extra, max_size)


def eval_queries(world: World, split: dict[str, str]):
    """Held-out evaluation set: the queries of the feedback split (never seen by SFT)."""
    return [q for q in world.queries if split.get(q.query_id) == "feedback"]


# -- stages ---------------------------------------------------------------------


def _stage_world(cfg: LabConfig, m: RunManifest) -> list[str]:
    save_world(gen_synthetic_world(cfg.world), Path(m.out_dir) / "world")
    return list(WORLD_FILES)


def _stage_index(cfg: LabConfig, m: RunManifest) -> list[str]:
    world = _world(m)
    save_index(build_index(world.documents), Path(m.out_dir) / "index.bin")
    return ["index.bin"]


def _stage_teacher(cfg: LabConfig, m: RunManifest) -> list[str]:
    world = _world(m)
    adapter = None
    if cfg.teacher.mode == "external" and cfg.teacher.fixtures:
        fixtures = json.loads(Path(cfg.teacher.fixtures).read_text(encoding="utf-8"))
        adapter = MockCompletionAdapter(fixtures)
    recs = teacher_rewrites(world.queries, cfg.teacher.n_per_query, cfg.teacher.mode, world, adapter, cfg.seed)
    out = Path(m.out_dir)
    save_records(recs, out / "teacher.jsonl")
    split = split_dataset(recs, cfg.teacher.sft_fraction, cfg.seed)
    (out / "split.json").write_text(json.dumps(split, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return ["teacher.jsonl", "split.json"]


def _stage_base(cfg: LabConfig, m: RunManifest) -> list[str]:
    world = _world(m)
    thesaurus = world_thesaurus(world, cfg.base.n_distractors, cfg.seed) if cfg.base.enabled else {}
    vocab = lab_vocabulary(world, thesaurus, cfg.policy.vocab_max_size)
    if cfg.base.enabled:
        ckpt = pretrain_base(vocab, thesaurus, cfg.pretrain, Path(m.out_dir) / "logs" / "pretrain.jsonl",
                             **cfg.policy.arch())
    else:
        ckpt = PolicyCheckpoint(new_policy(vocab, cfg.seed, **cfg.policy.arch()), vocab,
                                {"stage": "init"}, cfg.seed)
    save_checkpoint(ckpt, Path(m.out_dir) / "base.ckpt")
    return ["base.ckpt", "logs/pretrain.jsonl"] if cfg.base.enabled else ["base.ckpt"]


def _stage_sft(cfg: LabConfig, m: RunManifest) -> list[str]:
    base = load_checkpoint(m.output("base", "base.ckpt"))
    split = _split(m)
    recs = load_records(m.output("teacher", "teacher.jsonl"))
    pairs = [(r.original_query, r.rewrite) for r in recs if split[r.query_id] == "sft"]
    ckpt, _ = run_sft(cfg.train, pairs, base, Path(m.out_dir) / "logs" / "sft.jsonl")
    save_checkpoint(ckpt, Path(m.out_dir) / "sft.ckpt")
    return ["sft.ckpt", "logs/sft.jsonl"]


def _stage_score(cfg: LabConfig, m: RunManifest) -> list[str]:
    world = _world(m)
    index = load_index(m.output("index", "index.bin"))
    split = _split(m)
    recs = [r for r in load_records(m.output("teacher", "teacher.jsonl")) if split[r.query_id] == "feedback"]
    ds = build_feedback_dataset(recs, index, _scorer(cfg, index, world), cfg.score.k,
                                cfg.score.max_pairs_per_query)
    save_feedback_dataset(ds, Path(m.out_dir) / "feedback")
    return ["feedback/pairs.jsonl", "feedback/kto.jsonl", "feedback/meta.json"]


def _stage_offline(method: str) -> Callable[[LabConfig, RunManifest], list[str]]:
    def run(cfg: LabConfig, m: RunManifest) -> list[str]:
        sft = load_checkpoint(m.output("sft", "sft.ckpt"))
        m.output("score", "feedback/meta.json")
        ds = load_feedback_dataset(Path(m.out_dir) / "feedback")
        ckpt = run_offline(cfg.train, ds, sft, method, Path(m.out_dir) / "logs" / f"{method}.jsonl")
        save_checkpoint(ckpt, Path(m.out_dir) / f"{method}.ckpt")
        return [f"{method}.ckpt", f"logs/{method}.jsonl"]
    return run


def _stage_ppo(cfg: LabConfig, m: RunManifest) -> list[str]:
    world = _world(m)
    index = load_index(m.output("index", "index.bin"))
    sft = load_checkpoint(m.output("sft", "sft.ckpt"))
    split = _split(m)
    queries = [q.question for q in world.queries if split.get(q.query_id) == "feedback"]
    ckpt, curve = run_ppo(cfg.train, queries, sft, index, _scorer(cfg, index, world),
                          log_path=Path(m.out_dir) / "logs" / "ppo.jsonl")
    save_checkpoint(ckpt, Path(m.out_dir) / "ppo.ckpt")
    (Path(m.out_dir) / "ppo_curve.json").write_text(json.dumps(curve) + "\n", encoding="utf-8")
    return ["ppo.ckpt", "ppo_curve.json", "logs/ppo.jsonl"]


def _checkpoints_for_eval(m: RunManifest) -> dict[str, Path]:
    out = {"sft": m.output("sft", "sft.ckpt")}
    for stage, name in FEEDBACK_CKPTS.items():
        if stage in m.stages and (Path(m.out_dir) / f"{name}.ckpt").exists():
            out[name] = Path(m.out_dir) / f"{name}.ckpt"
    return out


def _stage_eval(cfg: LabConfig, m: RunManifest) -> list[str]:
    world = _world(m)
    index = load_index(m.output("index", "index.bin"))
    scorer = _scorer(cfg, index, world)
    queries = eval_queries(world, _split(m))
    gen = cfg.eval.generation(cfg.seed)
    outputs, reports = [], []
    for name in cfg.eval.settings:
        setting = cfg.eval.setting(name)
        if setting.mode == "oqr":
            rep = evaluate(None, queries, index, scorer, setting, gen, label="oqr")
            reports.append(rep)
            outputs.append(_save_report(m, rep, f"oqr-{setting.order}"))
            continue
        for label, path in _checkpoints_for_eval(m).items():
            rep = evaluate(load_checkpoint(path), queries, index, scorer, setting, gen, label=label)
            reports.append(rep)
            outputs.append(_save_report(m, rep, f"{label}-{setting.name}"))
    if any(r.label == "oqr" for r in reports):
        table = report_compare(reports)
        (Path(m.out_dir) / "reports" / "compare.csv").write_text(table.to_csv(), encoding="utf-8")
        (Path(m.out_dir) / "reports" / "compare.txt").write_text(table.to_text(), encoding="utf-8")
        outputs += ["reports/compare.csv", "reports/compare.txt"]
    return outputs


def _save_report(m: RunManifest, rep: EvalReport, stem: str) -> str:
    rep.save(Path(m.out_dir) / "reports" / f"{stem}.json")
    return f"reports/{stem}.json"


_RUNNERS: dict[str, Callable[[LabConfig, RunManifest], list[str]]] = {
    "world": _stage_world,
    "index": _stage_index,
    "teacher": _stage_teacher,
    "base": _stage_base,
    "sft": _stage_sft,
    "score": _stage_score,
    "feedback-dpo": _stage_offline("dpo"),
    "feedback-kto": _stage_offline("kto"),
    "feedback-ppo": _stage_ppo,
    "eval": _stage_eval,
}


def _stage_inputs(m: RunManifest, stage: str) -> dict[str, str]:
    _, upstream = _DEPS[stage]
    if stage == "eval":
        upstream = upstream + tuple(s for s in FEEDBACK_CKPTS if s in m.stages)
    inputs = {}
    for up in upstream:
        rec = m.stages.get(up)
        if rec is None:
            raise MissingArtifact(f"stage '{stage}' needs the outputs of '{up}': run '{up}' first")
        inputs.update(rec.outputs)
    return inputs


def _config_hash(cfg: LabConfig, stage: str) -> str:
    sections, _ = _DEPS[stage]
    d = cfg.to_dict()
    return _hash_obj({"seed": cfg.seed, **{s: d[s] for s in sections}})


def _up_to_date(m: RunManifest, stage: str, cfg_hash: str, inputs: dict[str, str]) -> bool:
    rec = m.stages.get(stage)
    if rec is None or rec.config_hash != cfg_hash or rec.inputs != inputs:
        return False
    root = Path(m.out_dir)
    for name, h in {**rec.inputs, **rec.outputs}.items():
        p = root / name
        if not p.exists() or sha256_file(p) != h:
            return False
    return True


def run_stage(manifest: RunManifest, stage: str, cfg: LabConfig, force: bool = False) -> RunManifest:
    if stage not in _RUNNERS:
        raise ValueError(f"unknown stage {stage!r}; choose from {', '.join(STAGES)}")
    inputs = _stage_inputs(manifest, stage)
    cfg_hash = _config_hash(cfg, stage)
    if not force and _up_to_date(manifest, stage, cfg_hash, inputs):
        log.info("stage %s up to date", stage)
        return manifest
    t0 = time.perf_counter()
    torch.manual_seed(cfg.seed)
    written = _RUNNERS[stage](cfg, manifest)
    root = Path(manifest.out_dir)
    outputs = {name: sha256_file(root / name) for name in written}
    manifest.stages[stage] = StageRecord(cfg_hash, inputs, outputs, round(time.perf_counter() - t0, 3))
    manifest.config = cfg.to_dict()
    manifest.seed = cfg.seed
    manifest.save()
    log.info("stage %s done in %.1fs", stage, manifest.stages[stage].wall_clock)
    return manifest


def run_pipeline(cfg: LabConfig, out_dir: str | Path, stages: Sequence[str] = DEFAULT_CHAIN,
                 force: bool = False) -> RunManifest:
    m = RunManifest.open(out_dir, cfg)
    for s in stages:
        m = run_stage(m, s, cfg, force)
    return m


# -- comparison -------------------------------------------------------------------


@dataclass
class ComparisonTable:
    rows: list[dict]  # name, metrics, deltas

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", *METRICS, *(f"delta_{k}" for k in METRICS)])
        for r in self.rows:
            w.writerow([r["name"], *(repr(r["metrics"][k]) for k in METRICS),
                        *(repr(r["deltas"][k]) for k in METRICS)])
        return buf.getvalue()

    def to_text(self) -> str:
        width = max(len(r["name"]) for r in self.rows)
        head = f"{'setting':<{width}}  " + "  ".join(f"{k:>15}" for k in METRICS)
        lines = [head, "-" * len(head)]
        for r in self.rows:
            cells = [f"{r['metrics'][k]:6.4f} ({r['deltas'][k]:+.3f})" for k in METRICS]
            lines.append(f"{r['name']:<{width}}  " + "  ".join(f"{c:>15}" for c in cells))
        return "\n".join(lines) + "\n"


def _report_name(rep: EvalReport) -> str:
    s = EvalSetting(**rep.setting)
    return f"{rep.label or 'policy'}:{s.name}"


def report_compare(reports: Sequence[EvalReport]) -> ComparisonTable:
    """Aggregates side by side with deltas against the OQR baseline row."""
    if len(reports) < 2:
        raise ValueError("report_compare needs at least two reports")
    qsets = {tuple(r["query_id"] for r in rep.rows) for rep in reports}
    if len(qsets) != 1:
        raise ValueError("reports cover different query sets")
    ks = {rep.setting["k"] for rep in reports}
    if len(ks) != 1:
        raise ValueError(f"reports use different k values: {sorted(ks)}")
    oqr = [r for r in reports if r.setting["mode"] == "oqr"]
    if not oqr:
        raise ValueError("no OQR report to use as the baseline")
    base = next((r for r in oqr if r.setting["order"] == "raw"), oqr[0])
    ordered = [base] + [r for r in reports if r is not base]
    rows = [{"name": _report_name(r), "metrics": dict(r.metrics),
             "deltas": {k: r.metrics[k] - base.metrics[k] for k in METRICS}} for r in ordered]
    return ComparisonTable(rows)


def sweep_rewrites(cfg: LabConfig, m: RunManifest, checkpoint: str = "sft",
                   counts: Sequence[int] = range(0, 6), order: str = "raw") -> ComparisonTable:
    """Expand-mode metrics as the number of rewrites grows (0 rewrites = OQR)."""
    world = _world(m)
    index = load_index(m.output("index", "index.bin"))
    scorer = _scorer(cfg, index, world)
    queries = eval_queries(world, _split(m))
    ckpt = load_checkpoint(Path(m.out_dir) / f"{checkpoint}.ckpt")
    reports = []
    for n in counts:
        setting = (EvalSetting("oqr", order, cfg.eval.k) if n == 0
                   else EvalSetting("expand", order, cfg.eval.k, n))
        gen = cfg.eval.generation(cfg.seed)
        rep = evaluate(ckpt if n else None, queries, index, scorer, setting, gen,
                       label="oqr" if n == 0 else f"{checkpoint}x{n}")
        reports.append(rep)
    return report_compare(reports)
