"""Train every fusion-mode / sampling arm at the desk budget and write one CSV row per arm.

    python3 scripts/ablation.py --out runs/ablation.csv
"""

import argparse
import logging

from uniflow.evaluate import ablation_run, write_ablation_csv
from uniflow.model import ModelConfig
from uniflow.train import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="ablation.csv")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=3000)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    rows = ablation_run(TrainConfig(steps=args.steps, seed=args.seed), ModelConfig())
    write_ablation_csv(rows, args.out)
    for r in rows:
        print(r)


if __name__ == "__main__":
    main()
