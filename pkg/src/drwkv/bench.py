"""Inference latency and memory as functions of generated sequence length.

Each measurement pushes ``T`` dummy token vectors through the block stack one
at a time: the attention baseline grows its key/value cache, the RWKV
families update a fixed-size state. Timed regions run single-threaded.
"""
from __future__ import annotations

import csv
import gc
import time
import tracemalloc
from dataclasses import asdict, dataclass, fields

import numpy as np

from .attention import block_step_cached, init_cache
from .model import FAMILIES, DecisionModel, ModelConfig
from .numeric import make_rng
from .rwkv import block_step, init_state

DEFAULT_LENGTHS = (64, 128, 256, 512, 1024, 2048, 4096)
CSV_COLUMNS = ("family", "T", "median_ms", "iqr_ms", "state_bytes", "cache_bytes",
               "peak_bytes", "repeats", "seed")


@dataclass
class BenchConfig:
    layers: int = 3
    width: int = 128
    heads: int = 4
    dtype: str = "float32"
    repeats: int = 5
    warmup: int = 1
    min_time: float = 0.02  # seconds; shorter runs are repeated in an inner loop
    seed: int = 0


@dataclass
class BenchPoint:
    """``median_ms``/``iqr_ms`` are per generated token; totals are ``median_ms * T``."""

    family: str
    T: int
    median_ms: float
    iqr_ms: float
    state_bytes: int
    cache_bytes: int
    peak_bytes: int
    repeats: int
    seed: int

    def __post_init__(self):
        if self.repeats < 5:
            raise ValueError("need at least 5 repeats")
        if not self.median_ms > 0:
            raise ValueError("latency must be positive")


def build_model(family: str, cfg: BenchConfig) -> DecisionModel:
    mc = ModelConfig(family=family, layers=cfg.layers, width=cfg.width, heads=cfg.heads, seed=cfg.seed)
    return DecisionModel(mc).astype(np.dtype(cfg.dtype))


def generate(model: DecisionModel, tokens: np.ndarray):
    """Feed ``tokens`` (T, D) through the stack incrementally; returns the final state or caches."""
    blocks = model.blocks
    if model.config.family == "dt":
        mem = [init_cache(b, (1,), tokens.dtype) for b in blocks]
        for t in range(len(tokens)):
            x = tokens[t:t + 1]
            for b, c in zip(blocks, mem):
                x = block_step_cached(x, c, b)
        return mem
    state = init_state(blocks, (1,), tokens.dtype)
    layers = state.layers
    for t in range(len(tokens)):
        x = tokens[t:t + 1]
        for i, b in enumerate(blocks):
            x, layers[i] = block_step(x, layers[i], b)
    return state


def _tokens(cfg: BenchConfig, T: int) -> np.ndarray:
    return make_rng(cfg.seed, 9, T).standard_normal((T, cfg.width)).astype(cfg.dtype)


def _time_once(model, tokens, inner: int) -> float:
    t0 = time.perf_counter()
    for _ in range(inner):
        generate(model, tokens)
    return (time.perf_counter() - t0) / inner


def _inner_loops(model, tokens, min_time: float) -> int:
    """Smallest power-of-two inner loop whose run time clears the timer comfortably."""
    floor = max(min_time, 1000 * time.get_clock_info("perf_counter").resolution)
    inner = 1
    while _time_once(model, tokens, inner) * inner < floor and inner < 1 << 16:
        inner *= 2
    return inner


def _accounting(family: str, mem) -> tuple[int, int]:
    if family == "dt":
        return 0, int(sum(c.nbytes for c in mem))
    return mem.nbytes, 0


def bench_latency(cfg: BenchConfig, families=tuple(FAMILIES), lengths=DEFAULT_LENGTHS) -> list[BenchPoint]:
    points = []
    for fam in families:
        model = build_model(fam, cfg)
        for T in lengths:
            toks = _tokens(cfg, T)
            mem = generate(model, toks)  # doubles as the first warmup run
            for _ in range(cfg.warmup - 1):
                generate(model, toks)
            inner = _inner_loops(model, toks, cfg.min_time)
            gc.disable()
            try:
                times = np.array([_time_once(model, toks, inner) for _ in range(cfg.repeats)])
            finally:
                gc.enable()
            q1, med, q3 = np.percentile(times * 1e3 / T, [25, 50, 75])
            sb, cb = _accounting(fam, mem)
            points.append(BenchPoint(fam, T, float(med), float(q3 - q1), sb, cb, 0, cfg.repeats, cfg.seed))
    return points


def bench_memory(cfg: BenchConfig, families=tuple(FAMILIES), lengths=DEFAULT_LENGTHS) -> list[BenchPoint]:
    """Exact persistent bytes plus the traced allocation peak of one generation.

    Latency fields are filled with a single untimed-quality run and should not
    be used for scaling claims.
    """
    points = []
    for fam in families:
        model = build_model(fam, cfg)
        for T in lengths:
            toks = _tokens(cfg, T)
            gc.collect()
            tracemalloc.start()
            t0 = time.perf_counter()
            mem = generate(model, toks)
            dt = time.perf_counter() - t0
            _, peak = tracemalloc.get_traced_memory()
            tracemalloc.stop()
            sb, cb = _accounting(fam, mem)
            points.append(BenchPoint(fam, T, dt * 1e3 / T, 0.0, sb, cb, int(peak), cfg.repeats, cfg.seed))
    return points


def run_bench(cfg: BenchConfig, families=tuple(FAMILIES), lengths=DEFAULT_LENGTHS) -> list[BenchPoint]:
    """Latency from :func:`bench_latency` merged with the peak from :func:`bench_memory`."""
    lat = bench_latency(cfg, families, lengths)
    mem = {(p.family, p.T): p.peak_bytes for p in bench_memory(cfg, families, lengths)}
    for p in lat:
        p.peak_bytes = mem[(p.family, p.T)]
    return lat


def loglog_slope(points: list[BenchPoint], family: str, lo: int = 256, hi: int = 4096) -> float:
    """Least-squares slope of log(total generation time) against log T."""
    sel = [p for p in points if p.family == family and lo <= p.T <= hi]
    if len(sel) < 2:
        raise ValueError(f"need two lengths in [{lo}, {hi}] for {family}")
    x = np.log([p.T for p in sel])
    y = np.log([p.median_ms * p.T for p in sel])
    return float(np.polyfit(x, y, 1)[0])


def write_csv(path, points: list[BenchPoint], config: dict | None = None) -> None:
    """Plot-ready CSV; the effective config goes in ``#`` comment lines above the header."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for k, v in (config or {}).items():
            fh.write(f"# {k}={v}\n")
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for p in points:
            w.writerow([p.family, p.T, repr(p.median_ms), repr(p.iqr_ms), p.state_bytes,
                        p.cache_bytes, p.peak_bytes, p.repeats, p.seed])


def read_csv(path) -> list[BenchPoint]:
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    types = {f.name: f.type for f in fields(BenchPoint)}
    conv = {"str": str, "int": int, "float": float}
    return [BenchPoint(**{k: conv[types[k]](v) for k, v in r.items()}) for r in rows]


def config_echo(cfg: BenchConfig) -> dict:
    return asdict(cfg)
