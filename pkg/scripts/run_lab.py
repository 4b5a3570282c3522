"""Run every stage (including DPO and PPO) and print the comparison table.

    python scripts/run_lab.py --out runs/lab [--config configs/default.yaml] [--seed 0]
"""

import argparse
import logging
from pathlib import Path

from qrlab.config import load_config
from qrlab.pipeline import STAGES, run_pipeline


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", type=Path, default=None)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--out", type=Path, default=Path("runs/lab"))
    ap.add_argument("--force", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = load_config(args.config, args.seed)
    m = run_pipeline(cfg, args.out, STAGES, args.force)
    for stage, rec in m.stages.items():
        print(f"{stage:<13} {rec.wall_clock:8.1f}s")
    print((args.out / "reports" / "compare.txt").read_text(encoding="utf-8"), end="")


if __name__ == "__main__":
    main()
