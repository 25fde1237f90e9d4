"""Command-line entry point: ``drwkv <command> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 missing input, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench as bm
from . import config as cf
from . import envs
from .lifelong import bwt, j_lrl, load_record, save_record, train_task_sequence
from .model import FAMILIES, ConfigError, DecisionModel, Normalizer, load_checkpoint, save_checkpoint
from .numeric import NumericError
from .rollout import evaluate
from .train import train_offline

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


def _families(text: str) -> list[str]:
    fams = [f.strip() for f in text.split(",") if f.strip()]
    bad = [f for f in fams if f not in FAMILIES]
    if bad:
        raise ConfigError(f"unknown family {bad[0]!r}; valid: {', '.join(FAMILIES)}")
    return fams


def _ints(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _resolve(args) -> cf.RunConfig:
    """Config file, then ``--set`` pairs, then the dedicated flags."""
    pairs = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    flag_keys = {"family": "model.family", "steps": "train.steps", "lr": "train.lr",
                 "noise": "env.noise", "data_dir": "io.data_dir",
                 "repeats": "bench.repeats"}
    for attr, key in flag_keys.items():
        val = getattr(args, attr, None)
        if val is not None and key is not None:
            pairs[key] = str(val)
    if getattr(args, "seeds", None):
        pairs["seeds"] = args.seeds
    return cf.load(args.config, pairs)


def _load_task(cfg: cf.RunConfig, task: int):
    path = envs.dataset_path(cfg.io.resolved_data_dir(), task)
    if not path.exists():
        raise FileNotFoundError(f"dataset {path} not found; run gen-data first")
    return envs.load_dataset(path)


def _echo_lines(cfg: cf.RunConfig, **extra) -> list[str]:
    return [f"# {line}" for line in cf.to_lines(cfg)] + [f"# {k}={v}" for k, v in extra.items()]


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, cfg: cf.RunConfig) -> int:
    suite = envs.default_task_suite(cfg.env.suite_seed)
    if args.task is not None:
        if not 0 <= args.task < len(suite):
            raise ConfigError(f"task {args.task} outside 0..{len(suite) - 1}")
        suite = [suite[args.task]]
    elif args.suite != "default":
        raise ConfigError(f"unknown suite {args.suite!r}; only 'default' exists")
    episodes = args.episodes if args.episodes is not None else cfg.env.episodes
    seed = args.seed if args.seed is not None else cfg.env.seed
    out = cfg.io.resolved_data_dir()
    out.mkdir(parents=True, exist_ok=True)
    paths = [envs.dataset_path(out, s.task_id) for s in suite]
    clash = [str(p) for p in paths if p.exists()]
    if clash and not args.force:
        print(f"refusing to overwrite {len(clash)} existing file(s) (e.g. {clash[0]}); pass --force",
              file=sys.stderr)
        return EXIT_CONFIG
    for spec, path in zip(suite, paths):
        _, meta = envs.generate_dataset(spec, episodes, cfg.env.noise, seed, path)
        print(f"task {spec.task_id:2d}  expert {meta.expert_return:9.3f}  random {meta.random_return:9.3f}"
              f"  success {meta.success_rate:.2f}  -> {path}")
    return EXIT_OK


def cmd_train(args, cfg: cf.RunConfig) -> int:
    meta, episodes = _load_task(cfg, args.task)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    mc = replace(cfg.model, seed=seed)
    tc = replace(cfg.train, seed=seed)
    model = DecisionModel(mc, Normalizer.from_meta(meta))
    losses = train_offline(model, episodes, tc) if tc.steps > 0 else []
    out = Path(args.out or cfg.io.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = out / f"{mc.family}_task{args.task:02d}_seed{seed}"
    ckpt = stem.with_suffix(".ckpt")
    save_checkpoint(ckpt, model, step=tc.steps, extra={"task": args.task})
    with open(stem.with_suffix(".loss.csv"), "w", newline="", encoding="utf-8") as fh:
        fh.write("\n".join(_echo_lines(cfg, task=args.task, seed=seed)) + "\n")
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        w.writerows([i, repr(v)] for i, v in enumerate(losses))
    final = f"{losses[-1]:.6f}" if losses else "n/a"
    print(f"{mc.family} task {args.task} seed {seed}: {tc.steps} steps, final loss {final} -> {ckpt}")
    return EXIT_OK


def cmd_eval(args, cfg: cf.RunConfig) -> int:
    meta, _ = _load_task(cfg, args.task)
    expert = args.checkpoint == "expert"
    model, header = None, {"config": "scripted expert"}
    if not expert:
        if not Path(args.checkpoint).exists():
            raise FileNotFoundError(f"checkpoint {args.checkpoint} not found")
        model, header = load_checkpoint(args.checkpoint)
        if model.config.state_dim != envs.OBS_DIM or model.config.act_dim != envs.ACT_DIM:
            raise ConfigError("checkpoint dimensions do not match the valve environment")
    seeds = _ints(args.seeds) if args.seeds else list(cfg.seeds)
    episodes = args.episodes if args.episodes is not None else cfg.env.eval_episodes
    results = [evaluate(model, meta, episodes, seed=s, mode=args.mode, expert=expert) for s in seeds]
    scores = np.concatenate([r.scores for r in results])
    succ = np.concatenate([r.successes for r in results])
    report = {"task": args.task, "checkpoint": args.checkpoint, "seeds": seeds, "episodes": episodes,
              "mean_score": float(scores.mean()), "std_score": float(scores.std()),
              "success_rate": float(succ.mean()), "model": header["config"],
              "config": cf.to_lines(cfg)}
    print(f"task {args.task}: score {report['mean_score']:.1f} ± {report['std_score']:.1f}, "
          f"success {report['success_rate']:.2f} (seeds {seeds}, {episodes} episodes each)")
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=1) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_lifelong(args, cfg: cf.RunConfig) -> int:
    suite = envs.default_task_suite(cfg.env.suite_seed)
    data = {s.task_id: _load_task(cfg, s.task_id) for s in suite}
    fams = _families(args.families) if args.families else [cfg.model.family]
    seeds = list(cfg.seeds)
    ll = replace(cfg.lifelong, er_enabled=not args.no_er)
    if args.task_steps is not None:
        ll = replace(ll, steps_per_task=args.task_steps)
    if args.episodes is not None:
        ll = replace(ll, eval_episodes=args.episodes)
    out = Path(args.out or cfg.io.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tag = "er" if ll.er_enabled else "naive"
    curve = []
    for fam in fams:
        records = []
        for seed in seeds:
            rec = train_task_sequence(suite, {k: (m, e) for k, (m, e) in data.items()},
                                      replace(cfg.model, family=fam), cfg.train, ll, seed)
            save_record(out / f"lifelong_{fam}_{tag}_seed{seed}.jsonl", rec)
            records.append(rec)
            print(f"{fam} seed {seed} ({tag}): J_LRL(10) {j_lrl(rec, len(suite)):.3f}  BWT {bwt(rec):.2f}")
        for k in range(1, len(suite) + 1):
            vals = [j_lrl(r, k) for r in records]
            curve.append([fam, tag, k, repr(float(np.mean(vals))), repr(float(np.std(vals))),
                          repr(float(np.mean([bwt(r) for r in records])))])
    with open(out / f"lifelong_curve_{tag}.csv", "w", newline="", encoding="utf-8") as fh:
        fh.write("\n".join(_echo_lines(cfg, lifelong=ll)) + "\n")
        w = csv.writer(fh)
        w.writerow(["family", "mode", "k", "j_lrl_mean", "j_lrl_std", "bwt_mean"])
        w.writerows(curve)
    return EXIT_OK


def cmd_bench(args, cfg: cf.RunConfig) -> int:
    fams = _families(args.families) if args.families else list(FAMILIES)
    lengths = _ints(args.lengths) if args.lengths else list(bm.DEFAULT_LENGTHS)
    bc = cfg.bench
    if args.seed is not None:
        bc = replace(bc, seed=args.seed)
    points = bm.run_bench(bc, fams, lengths)
    out = Path(args.out or Path(cfg.io.out_dir) / "bench.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    bm.write_csv(out, points, bm.config_echo(bc))
    for f in fams:
        if sum(1 for p in points if p.family == f and 256 <= p.T <= 4096) >= 2:
            print(f"{f}: log-log slope {bm.loglog_slope(points, f):.3f}")
    print(f"{len(points)} rows -> {out}")
    return EXIT_OK


def cmd_report(args, cfg: cf.RunConfig) -> int:
    root = Path(args.dir or cfg.io.out_dir)
    if not root.exists():
        raise FileNotFoundError(f"no such directory {root}")
    found = False
    for path in sorted(root.glob("lifelong_*_seed*.jsonl")):
        rec = load_record(path)
        k = rec.tasks_completed
        print(f"{path.name}: J_LRL({k}) {j_lrl(rec, k):.3f}  BWT {bwt(rec):.2f}")
        found = True
    for path in sorted(root.glob("bench*.csv")):
        points = bm.read_csv(path)
        for f in dict.fromkeys(p.family for p in points):
            try:
                print(f"{path.name}: {f} slope {bm.loglog_slope(points, f):.3f}")
            except ValueError:
                pass
        found = True
    if not found:
        raise FileNotFoundError(f"no lifelong records or bench CSVs under {root}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="drwkv", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--data-dir", help="dataset directory (default $DRWKV_DATA_DIR or ./data)")
        return sp

    g = common(sub.add_parser("gen-data", help="generate expert datasets"))
    g.add_argument("--suite", default="default")
    g.add_argument("--task", type=int)
    g.add_argument("--episodes", type=int)
    g.add_argument("--noise", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--force", action="store_true")

    t = common(sub.add_parser("train", help="train one family on one task"))
    t.add_argument("--family")
    t.add_argument("--task", type=int, default=0)
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")

    e = common(sub.add_parser("eval", help="score a checkpoint (or 'expert')"))
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--task", type=int, default=0)
    e.add_argument("--episodes", type=int)
    e.add_argument("--seeds")
    e.add_argument("--mode", choices=["recurrent", "cache", "window"])
    e.add_argument("--out")

    ll = common(sub.add_parser("lifelong", help="sequential training over the task suite"))
    ll.add_argument("--families")
    ll.add_argument("--seeds")
    ll.add_argument("--no-er", action="store_true")
    ll.add_argument("--steps", type=int, dest="task_steps", help="training steps per task")
    ll.add_argument("--episodes", type=int, help="evaluation episodes per task")
    ll.add_argument("--out")

    b = common(sub.add_parser("bench", help="latency/memory versus sequence length"))
    b.add_argument("--families")
    b.add_argument("--lengths")
    b.add_argument("--repeats", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--out")

    r = common(sub.add_parser("report", help="summarise lifelong records and bench CSVs"))
    r.add_argument("--dir")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "lifelong": cmd_lifelong, "bench": cmd_bench, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
