"""Sequential multi-task training with a fixed-capacity experience replay buffer."""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numeric as nc
from .envs import DatasetMeta, TaskSpec, Trajectory
from .model import DecisionModel, ModelConfig, Normalizer, TokenizedBatch
from .rollout import evaluate
from .train import Segment, SegmentSampler, TrainConfig, collate, make_optimizer, segments_of, train_steps


class BufferSizingError(ValueError):
    pass


class EmptyBufferError(LookupError):
    pass


class ReplayBuffer:
    """FIFO store of trajectory segments, budgeted in transitions.

    Inserting a trajectory splits it into segments of at most ``K`` steps;
    whole segments are evicted oldest-first until the budget holds again.
    """

    def __init__(self, capacity: int = 10_000, K: int = 20):
        self.capacity = capacity
        self.K = K
        self.segments: deque[tuple[int, Segment]] = deque()
        self.transitions = 0
        self.inserted = 0  # insertion counter; tags each segment with its order

    def __len__(self) -> int:
        return len(self.segments)

    def insert_segment(self, seg: Segment) -> None:
        if len(seg) > self.capacity:
            raise BufferSizingError(f"segment of {len(seg)} transitions exceeds capacity {self.capacity}")
        self.segments.append((self.inserted, seg))
        self.inserted += 1
        self.transitions += len(seg)
        while self.transitions > self.capacity:
            _, old = self.segments.popleft()
            self.transitions -= len(old)

    def insert(self, traj: Trajectory) -> "ReplayBuffer":
        if len(traj) == 0:
            raise ValueError("cannot insert an empty trajectory")
        segs = segments_of(traj, self.K)
        big = max(len(s) for s in segs)
        if big > self.capacity:
            raise BufferSizingError(f"segment of {big} transitions exceeds capacity {self.capacity}")
        for s in segs:
            self.insert_segment(s)
        return self

    def order(self) -> list[int]:
        return [i for i, _ in self.segments]

    def sample(self, n: int, rng: np.random.Generator) -> list[Segment]:
        """Uniform with replacement over stored segments."""
        if not self.segments:
            raise EmptyBufferError("replay buffer is empty")
        idx = rng.integers(0, len(self.segments), size=n)
        return [self.segments[i][1] for i in idx]


def buffer_sample(buf: ReplayBuffer, n_segments: int, seed: int) -> list[Segment]:
    return buf.sample(n_segments, nc.make_rng(seed, 3))


def mixed_batch(current: SegmentSampler | None, buf: ReplayBuffer | None, batch_size: int, rho: float,
                rng: np.random.Generator, K: int) -> tuple[TokenizedBatch, np.ndarray]:
    """Collate ``ceil(rho * B)`` replayed segments with current-task windows.

    Returns the batch and a boolean array marking which rows came from the buffer.
    """
    if not 0.0 <= rho <= 1.0 or batch_size < 1:
        raise ValueError("need 0 <= rho <= 1 and batch_size >= 1")
    have_buf = buf is not None and len(buf) > 0
    if current is None and not have_buf:
        raise EmptyBufferError("both the current dataset and the replay buffer are empty")
    n_buf = math.ceil(rho * batch_size) if have_buf else 0
    if current is None:
        n_buf = batch_size
    segs = (buf.sample(n_buf, rng) if n_buf else []) + \
        (current.sample(batch_size - n_buf, rng) if batch_size > n_buf else [])
    origin = np.arange(batch_size) < n_buf
    return collate(segs, K), origin


@dataclass
class LifelongConfig:
    steps_per_task: int = 5000
    eval_episodes: int = 20
    capacity: int = 10_000
    mix_ratio: float = 0.5
    fold_transitions: int | None = None  # default: capacity // number of tasks
    er_enabled: bool = True
    lr: float | None = 1e-3  # overrides the train config's rate; None keeps it


@dataclass
class LifelongRunRecord:
    task_order: list[int]
    scores: list[list[float]]     # scores[i][j]: normalised score on the j-th task after the i-th
    success: list[list[float]]    # success rate, same layout; task_order maps positions to ids
    seed: int
    er_enabled: bool
    config: dict
    events: list[dict] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)

    @property
    def tasks_completed(self) -> int:
        return len(self.scores)


def j_lrl(record: LifelongRunRecord, k: int) -> float:
    """Mean success over the first ``k`` tasks, measured after finishing task ``k``."""
    if not 1 <= k <= record.tasks_completed:
        raise IndexError(f"k={k} outside 1..{record.tasks_completed}")
    return float(np.mean(record.success[k - 1][:k]))


def bwt(record: LifelongRunRecord) -> float:
    """Backward transfer on normalised scores: mean of M[K][p] - M[p][p] over p < K."""
    K = record.tasks_completed
    if K < 2:
        return 0.0
    M = record.scores
    return float(np.mean([M[K - 1][p] - M[p][p] for p in range(K - 1)]))


def pooled_normalizer(metas: list[DatasetMeta]) -> Normalizer:
    """Mix per-task dataset statistics into one normaliser (weighted by episodes)."""
    w = np.array([m.episodes for m in metas], dtype=float)
    w /= w.sum()

    def pool(mean_key, std_key):
        mu = np.array([getattr(m, mean_key) for m in metas])
        sd = np.array([getattr(m, std_key) for m in metas])
        mean = (w[:, None] * mu).sum(0)
        var = (w[:, None] * (sd ** 2 + (mu - mean) ** 2)).sum(0)
        return mean, np.maximum(np.sqrt(var), 1e-6)

    sm, ss = pool("state_mean", "state_std")
    am, as_ = pool("action_mean", "action_std")
    scale = 1.0 / max(abs(float(np.dot(w, [m.expert_return for m in metas]))), 1.0)
    return Normalizer(sm, ss, am, as_, scale)


def train_task_sequence(suite: list[TaskSpec], datasets: dict, model_cfg: ModelConfig,
                        train_cfg: TrainConfig, ll_cfg: LifelongConfig, seed: int,
                        progress=None) -> LifelongRunRecord:
    """Train on each task once, in order, evaluating every task after each one.

    ``datasets`` maps task id to ``(meta, episodes)``. Task k's data reaches the
    buffer only after task k's training is over.
    """
    missing = [s.task_id for s in suite if s.task_id not in datasets]
    if missing:
        raise FileNotFoundError(f"missing datasets for tasks {missing}")
    metas = [datasets[s.task_id][0] for s in suite]
    if ll_cfg.lr is not None:
        train_cfg = replace(train_cfg, lr=ll_cfg.lr)
    cfg = ModelConfig(**{**asdict(model_cfg), "seed": seed})
    model = DecisionModel(cfg, pooled_normalizer(metas))
    K = cfg.context
    opt = make_optimizer(model, train_cfg)
    rng = nc.make_rng(seed, 4)
    fold = ll_cfg.fold_transitions or ll_cfg.capacity // len(suite)
    buf = ReplayBuffer(ll_cfg.capacity, K) if ll_cfg.er_enabled else None
    record = LifelongRunRecord(
        task_order=[s.task_id for s in suite], scores=[], success=[], seed=seed,
        er_enabled=ll_cfg.er_enabled,
        config={"model": asdict(cfg), "train": asdict(train_cfg), "lifelong": asdict(ll_cfg),
                "fold_transitions": fold})
    for i, spec in enumerate(suite):
        meta, episodes = datasets[spec.task_id]
        sampler = SegmentSampler(episodes, K)
        if buf is not None:
            next_batch = lambda _: mixed_batch(sampler, buf, train_cfg.batch_size,  # noqa: E731
                                               ll_cfg.mix_ratio, rng, K)[0]
        else:
            next_batch = lambda _: collate(sampler.sample(train_cfg.batch_size, rng), K)  # noqa: E731
        train_steps(model, next_batch, ll_cfg.steps_per_task, opt, record.losses)
        row_s, row_g = [0.0] * len(suite), [0.0] * len(suite)
        for j, s2 in enumerate(suite):
            res = evaluate(model, datasets[s2.task_id][0], ll_cfg.eval_episodes, seed=seed * 1000 + i)
            row_s[j] = res.mean_score
            row_g[j] = res.success_rate
            record.events.append({"after_task": i, "task_id": s2.task_id,
                                  "scores": res.scores.tolist(), "returns": res.returns.tolist(),
                                  "successes": [bool(x) for x in res.successes]})
        record.scores.append(row_s)
        record.success.append(row_g)
        if progress:
            progress(i, record)
        if buf is not None:
            order = rng.permutation(len(episodes))
            added = 0
            for e in order:
                if added >= fold:
                    break
                buf.insert(episodes[e])
                added += len(episodes[e])
    return record


def j_lrl_from_events(record: LifelongRunRecord, k: int) -> float:
    """Recompute :func:`j_lrl` from the per-episode evaluation log."""
    seen = set(record.task_order[:k])
    rates = [np.mean(ev["successes"]) for ev in record.events
             if ev["after_task"] == k - 1 and ev["task_id"] in seen]
    return float(np.mean(rates))


def save_record(path, record: LifelongRunRecord) -> None:
    """One JSON line per evaluation event, then a summary line."""
    lines = [json.dumps({"event": "eval", **ev}) for ev in record.events]
    summary = {k: v for k, v in asdict(record).items() if k != "events"}
    summary["j_lrl"] = [j_lrl(record, k) for k in range(1, record.tasks_completed + 1)]
    summary["bwt"] = bwt(record)
    lines.append(json.dumps({"event": "summary", **summary}))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_record(path) -> LifelongRunRecord:
    events, summary = [], None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        kind = obj.pop("event")
        if kind == "eval":
            events.append(obj)
        else:
            summary = obj
    if summary is None:
        raise ValueError(f"{path}: no summary record")
    summary.pop("j_lrl", None)
    summary.pop("bwt", None)
    return LifelongRunRecord(events=events, **summary)
