"""Component and patch/depth ablation at desk scale; writes <out>/ablation.csv.

    python scripts/ablation.py --config configs/desk.json --steps 200
"""

import argparse

from kmoe.cli import cmd_ablate
from kmoe.config import load


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/desk.json")
    ap.add_argument("--steps", type=int, default=None)
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()
    cfg = load(args.config)
    if args.steps is not None:
        cfg.train.steps = args.steps
    rows = cmd_ablate(cfg, args.out)
    print(f"{len(rows)} variants written to {args.out}/ablation.csv")


if __name__ == "__main__":
    main()
