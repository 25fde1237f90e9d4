"""Train every family on one valve task over three seeds; write seed-averaged loss curves and scores.

    python3 scripts/single_task.py --task 3 --out runs/single
"""
import argparse
import csv
from dataclasses import replace
from pathlib import Path

import numpy as np

from drwkv import config as cf
from drwkv import envs
from drwkv.model import FAMILIES, DecisionModel, Normalizer
from drwkv.rollout import evaluate
from drwkv.train import train_offline


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--task", type=int, default=3)
    ap.add_argument("--steps", type=int, default=5000)
    ap.add_argument("--families", default=",".join(FAMILIES))
    ap.add_argument("--out", default="runs/single")
    args = ap.parse_args()
    run = cf.RunConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = envs.default_task_suite(run.env.suite_seed)[args.task]
    eps, meta = envs.generate_dataset(spec, run.env.episodes, run.env.noise, run.env.seed)
    curves, rows = {}, []
    for fam in args.families.split(","):
        losses = []
        for seed in run.seeds:
            m = DecisionModel(replace(run.model, family=fam, seed=seed), Normalizer.from_meta(meta))
            losses.append(train_offline(m, eps, replace(run.train, steps=args.steps, seed=seed)))
            res = evaluate(m, meta, run.env.eval_episodes, seed=seed)
            rows.append([fam, seed, res.mean_score, res.std_score, res.success_rate])
            print(f"{fam} seed {seed}: score {res.mean_score:.1f} ± {res.std_score:.1f}, "
                  f"success {res.success_rate:.2f}", flush=True)
        curves[fam] = np.mean(losses, axis=0)
    with open(out / f"loss_task{args.task:02d}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", *curves])
        w.writerows([i, *(repr(float(c[i])) for c in curves.values())] for i in range(args.steps))
    with open(out / f"scores_task{args.task:02d}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["family", "seed", "mean_score", "std_score", "success_rate"])
        w.writerows(rows)


if __name__ == "__main__":
    main()
