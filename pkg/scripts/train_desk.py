"""Train the desk config once and print per-task metrics at several guidance scales.

    python3 scripts/train_desk.py --out runs/desk --seed 0
"""

import argparse
import logging
from pathlib import Path

from uniflow.checkpoint import save_checkpoint
from uniflow.evaluate import evaluate, write_eval_csv
from uniflow.model import ModelConfig
from uniflow.train import CsvLog, TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=3000)
    ap.add_argument("--fusion-mode", default="dual")
    ap.add_argument("--scales", default="1,3,5")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = CsvLog(out / "train_log.csv")
    ckpt = train(TrainConfig(steps=args.steps, seed=args.seed, fusion_mode=args.fusion_mode), ModelConfig(), on_step=log)
    log.close()
    save_checkpoint(ckpt, out / "checkpoint.ufad")

    reports = []
    for w in (float(x) for x in args.scales.split(",")):
        for task in ("ta_copy", "ta_denoise", "nta_events"):
            r = evaluate(ckpt, task, guidance_scale=w)
            reports.append(r)
            print(task, f"w={w:g}", {k: round(v, 4) for k, v in r.metrics.items()}, flush=True)
    write_eval_csv(reports, out / "eval_scales.csv")


if __name__ == "__main__":
    main()
