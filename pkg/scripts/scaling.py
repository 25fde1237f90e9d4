"""Latency and memory against generated length for all families, with log-log slopes.

    python3 scripts/scaling.py --out runs/bench.csv
"""
import argparse
from pathlib import Path

from drwkv import bench as bm
from drwkv.model import FAMILIES


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lengths", default=",".join(map(str, bm.DEFAULT_LENGTHS)))
    ap.add_argument("--dtype", default="float32", choices=["float32", "float64"])
    ap.add_argument("--out", default="runs/bench.csv")
    args = ap.parse_args()
    cfg = bm.BenchConfig(dtype=args.dtype)
    lengths = [int(x) for x in args.lengths.split(",")]
    points = bm.run_bench(cfg, FAMILIES, lengths)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    bm.write_csv(args.out, points, bm.config_echo(cfg))
    print(f"{'family':8s} {'T':>5s} {'ms/token':>9s} {'state B':>9s} {'cache B':>10s} {'peak B':>10s}")
    for p in points:
        print(f"{p.family:8s} {p.T:5d} {p.median_ms:9.4f} {p.state_bytes:9d} {p.cache_bytes:10d} {p.peak_bytes:10d}")
    in_range = [T for T in lengths if 256 <= T <= 4096]
    lo, hi = (256, 4096) if len(in_range) >= 2 else (min(lengths), max(lengths))
    for f in FAMILIES:
        print(f"{f}: log-log slope over T in [{lo}, {hi}]: {bm.loglog_slope(points, f, lo, hi):.2f}")


if __name__ == "__main__":
    main()
