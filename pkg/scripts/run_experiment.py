"""Run one experiment config and print a mean-over-seeds table.

    python scripts/run_experiment.py experiments/ablation.json
    python scripts/run_experiment.py experiments/ood.json --metric lar1hop
"""
from __future__ import annotations

import argparse
import logging
from collections import defaultdict

import numpy as np

from ppgn.harness import load_config, run_experiment


def summarise(rows, metric):
    cells = defaultdict(list)
    for r in rows:
        cells[(r["scenario"], r["beta"], r["stage"])].append(float(r[metric]))
    print(f"{'scenario':<20} {'beta':>5} {'method':<8} {metric:>8} {'std':>7} seeds")
    for (scen, beta, stage), v in cells.items():
        print(f"{scen:<20} {beta:>5} {stage:<8} {np.mean(v):8.4f} {np.std(v):7.4f} {len(v)}")


def main():
    p = argparse.ArgumentParser()
    p.add_argument("config")
    p.add_argument("--metric", default="lar", choices=["lar", "lar1hop", "f1"])
    p.add_argument("--out", help="override the config's output directory")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = load_config(args.config)
    if args.out:
        cfg.out = args.out
    res = run_experiment(cfg)
    summarise(res.rows, args.metric)
    if cfg.out:
        print(f"results in {cfg.out}/results.csv")


if __name__ == "__main__":
    main()
