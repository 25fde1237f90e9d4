"""Run the ten-task lifelong protocol with and without replay and print J_LRL / BWT per family.

    python3 scripts/lifelong.py --families dt,drwkv6 --out runs/lifelong
"""
import argparse
from dataclasses import replace
from pathlib import Path

import numpy as np

from drwkv import config as cf
from drwkv import envs
from drwkv.lifelong import bwt, j_lrl, save_record, train_task_sequence
from drwkv.model import FAMILIES


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--families", default=",".join(FAMILIES))
    ap.add_argument("--steps", type=int, help="training steps per task (default from RunConfig)")
    ap.add_argument("--out", default="runs/lifelong")
    args = ap.parse_args()
    run = cf.RunConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    suite = envs.default_task_suite(run.env.suite_seed)
    data = {}
    for s in suite:
        eps, meta = envs.generate_dataset(s, run.env.episodes, run.env.noise, run.env.seed)
        data[s.task_id] = (meta, eps)
    print(f"{'family':8s} {'mode':6s} {'J_LRL(10)':>10s} {'BWT':>8s}")
    for fam in args.families.split(","):
        for er in (True, False):
            ll = replace(run.lifelong, er_enabled=er)
            if args.steps:
                ll = replace(ll, steps_per_task=args.steps)
            recs = []
            for seed in run.seeds:
                rec = train_task_sequence(suite, data, replace(run.model, family=fam), run.train, ll, seed)
                save_record(out / f"lifelong_{fam}_{'er' if er else 'naive'}_seed{seed}.jsonl", rec)
                recs.append(rec)
            J = np.mean([j_lrl(r, len(suite)) for r in recs])
            B = np.mean([bwt(r) for r in recs])
            print(f"{fam:8s} {'er' if er else 'naive':6s} {J:10.3f} {B:8.2f}", flush=True)


if __name__ == "__main__":
    main()
