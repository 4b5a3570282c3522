"""Command-line entry point: ``qrlab <group> <action> [--config F] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import load_config
from .evaluation import EvalReport
from .pipeline import (
    DEFAULT_CHAIN,
    STAGES,
    MissingArtifact,
    RunManifest,
    report_compare,
    run_pipeline,
    run_stage,
    sweep_rewrites,
)

# (group, action) -> stages it runs, in order
COMMANDS = {
    ("world", "gen"): ["world"],
    ("index", "build"): ["index"],
    ("teacher", "gen"): ["teacher"],
    ("data", "split"): ["teacher"],
    ("train", "base"): ["base"],
    ("train", "sft"): ["sft"],
    ("score", "feedback"): ["score"],
    ("train", "dpo"): ["feedback-dpo"],
    ("train", "kto"): ["feedback-kto"],
    ("train", "ppo"): ["feedback-ppo"],
    ("eval", "run"): ["eval"],
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="YAML config file")
    p.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    p.add_argument("--out", type=Path, default=Path("runs/default"), help="run directory")
    p.add_argument("--force", action="store_true", help="rerun even when inputs are unchanged")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qrlab", description=__doc__)
    groups = parser.add_subparsers(dest="group", required=True)
    actions: dict[str, argparse._SubParsersAction] = {}
    for group, action in COMMANDS:
        if group not in actions:
            actions[group] = groups.add_parser(group).add_subparsers(dest="action", required=True)
        sp = actions[group].add_parser(action)
        _common(sp)
        if (group, action) == ("data", "split"):
            sp.add_argument("--sft-fraction", type=float, default=None)

    rep = groups.add_parser("report").add_subparsers(dest="action", required=True)
    cmp_ = rep.add_parser("compare", help="compare saved EvalReport JSON files")
    _common(cmp_)
    cmp_.add_argument("reports", nargs="*", type=Path,
                      help="report files (default: every report under <out>/reports)")

    sweep = groups.add_parser("sweep").add_subparsers(dest="action", required=True)
    sw = sweep.add_parser("rewrites", help="expand-mode metrics for 0..5 rewrites")
    _common(sw)
    sw.add_argument("--checkpoint", default="sft", help="sft, dpo, kto or ppo")
    sw.add_argument("--max-rewrites", type=int, default=5)
    sw.add_argument("--order", choices=("raw", "ranked"), default="raw")

    run = groups.add_parser("pipeline").add_subparsers(dest="action", required=True)
    pr = run.add_parser("run", help="run a chain of stages")
    _common(pr)
    pr.add_argument("--stages", default=",".join(DEFAULT_CHAIN),
                    help=f"comma-separated subset of: {', '.join(STAGES)}")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = load_config(args.config, args.seed)
    key = (args.group, args.action)
    try:
        if key in COMMANDS:
            if key == ("data", "split") and args.sft_fraction is not None:
                cfg.teacher.sft_fraction = args.sft_fraction
            m = RunManifest.open(args.out, cfg)
            for stage in COMMANDS[key]:
                m = run_stage(m, stage, cfg, force=args.force or key == ("data", "split"))
            rec = m.stages[COMMANDS[key][-1]]
            print(json.dumps({"outputs": sorted(rec.outputs), "wall_clock": rec.wall_clock}, indent=2))
            if key == ("eval", "run") and (args.out / "reports" / "compare.txt").exists():
                print((args.out / "reports" / "compare.txt").read_text(encoding="utf-8"), end="")
        elif key == ("pipeline", "run"):
            stages = [s.strip() for s in args.stages.split(",") if s.strip()]
            run_pipeline(cfg, args.out, stages, args.force)
            compare = args.out / "reports" / "compare.txt"
            if compare.exists():
                print(compare.read_text(encoding="utf-8"), end="")
        elif key == ("report", "compare"):
            paths = args.reports or sorted((args.out / "reports").glob("*.json"))
            table = report_compare([EvalReport.load(p) for p in paths])
            args.out.mkdir(parents=True, exist_ok=True)
            (args.out / "compare.csv").write_text(table.to_csv(), encoding="utf-8")
            print(table.to_text(), end="")
        elif key == ("sweep", "rewrites"):
            m = RunManifest.open(args.out, cfg)
            table = sweep_rewrites(cfg, m, args.checkpoint, range(0, args.max_rewrites + 1), args.order)
            (args.out / "reports").mkdir(parents=True, exist_ok=True)
            (args.out / "reports" / f"sweep-{args.checkpoint}-{args.order}.csv").write_text(
                table.to_csv(), encoding="utf-8")
            print(table.to_text(), end="")
    except (MissingArtifact, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
