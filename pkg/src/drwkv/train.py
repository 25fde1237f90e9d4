"""Optimiser, segment sampling and the offline training loop."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numeric as nc
from .envs import Trajectory
from .model import DecisionModel, TokenizedBatch, returns_to_go


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 1e-4
    grad_clip: float = 0.25
    warmup: int = 100
    seed: int = 0


class AdamW:
    """Adam with decoupled weight decay (matrices only), global-norm clipping and linear warmup."""

    def __init__(self, params, lr=1e-4, weight_decay=1e-4, betas=(0.9, 0.999), eps=1e-8,
                 grad_clip: float | None = 0.25, warmup: int = 0):
        self.params = list(params)
        self.lr, self.wd, self.betas, self.eps = lr, weight_decay, betas, eps
        self.grad_clip, self.warmup = grad_clip, warmup
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: nc.Gradients) -> float:
        gs = [grads.of(p) for p in self.params]
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in gs))
        if self.grad_clip and norm > self.grad_clip:
            scale = self.grad_clip / (norm + 1e-6)
            gs = [g * scale for g in gs]
        self.t += 1
        lr = self.lr * min(1.0, self.t / self.warmup) if self.warmup else self.lr
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, g, m, v in zip(self.params, gs, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.wd and p.data.ndim >= 2:
                p.data *= 1 - lr * self.wd
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


@dataclass
class Segment:
    """At most K consecutive timesteps of one episode, with its returns-to-go."""

    rtg: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    timesteps: np.ndarray
    task_id: int

    def __len__(self) -> int:
        return len(self.timesteps)


def segments_of(traj: Trajectory, K: int) -> list[Segment]:
    """Split an episode into consecutive non-overlapping segments of <= K steps."""
    rtg = returns_to_go(traj.rewards)
    out = []
    for s in range(0, len(traj), K):
        e = min(s + K, len(traj))
        out.append(Segment(rtg[s:e, None], traj.states[s:e], traj.actions[s:e],
                           np.arange(s, e), traj.task_id))
    return out


def window(traj: Trajectory, start: int, K: int, rtg: np.ndarray | None = None) -> Segment:
    rtg = returns_to_go(traj.rewards) if rtg is None else rtg
    e = min(start + K, len(traj))
    return Segment(rtg[start:e, None], traj.states[start:e], traj.actions[start:e],
                   np.arange(start, e), traj.task_id)


def collate(segs: list[Segment], K: int) -> TokenizedBatch:
    """Right-pad segments to K timesteps; padded entries are zero and masked."""
    B = len(segs)
    S = segs[0].states.shape[-1]
    A = segs[0].actions.shape[-1]
    rtg = np.zeros((B, K, 1))
    states = np.zeros((B, K, S))
    actions = np.zeros((B, K, A))
    ts = np.zeros((B, K), dtype=int)
    mask = np.zeros((B, K), dtype=bool)
    for i, sg in enumerate(segs):
        n = len(sg)
        rtg[i, :n], states[i, :n], actions[i, :n] = sg.rtg, sg.states, sg.actions
        ts[i, :n] = sg.timesteps
        mask[i, :n] = True
    return TokenizedBatch(rtg, states, actions, ts, mask)


class SegmentSampler:
    """Windows of K steps from a list of episodes.

    Episodes are drawn with probability proportional to length, start offsets
    uniformly, so every transition is equally likely to be covered.
    """

    def __init__(self, episodes: list[Trajectory], K: int):
        if not episodes:
            raise ValueError("no episodes to sample from")
        self.episodes = episodes
        self.K = K
        self._rtg = [returns_to_go(e.rewards) for e in episodes]
        lens = np.array([len(e) for e in episodes], dtype=float)
        self._p = lens / lens.sum()

    def sample(self, n: int, rng: np.random.Generator) -> list[Segment]:
        idx = rng.choice(len(self.episodes), size=n, p=self._p)
        out = []
        for i in idx:
            ep = self.episodes[i]
            start = int(rng.integers(0, len(ep)))
            out.append(window(ep, start, self.K, self._rtg[i]))
        return out


def train_steps(model: DecisionModel, next_batch, steps: int, opt: AdamW,
                log: list | None = None) -> list[float]:
    """Run ``steps`` optimisation steps; ``next_batch(step)`` yields a TokenizedBatch."""
    losses = [] if log is None else log
    params = model.parameters()
    for step in range(steps):
        batch = next_batch(step)
        with nc.Tape() as tape:
            loss = model.forward_loss(batch)
        val = float(loss.data)
        if not math.isfinite(val):
            raise nc.NumericError(f"non-finite loss at step {step}")
        grads = nc.backward(tape, loss)
        opt.step(grads)
        losses.append(val)
    del params
    return losses


def make_optimizer(model: DecisionModel, cfg: TrainConfig) -> AdamW:
    return AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay,
                 grad_clip=cfg.grad_clip, warmup=cfg.warmup)


def train_offline(model: DecisionModel, episodes: list[Trajectory], cfg: TrainConfig) -> list[float]:
    sampler = SegmentSampler(episodes, model.config.context)
    rng = nc.make_rng(cfg.seed, 2)
    opt = make_optimizer(model, cfg)
    K = model.config.context
    return train_steps(model, lambda _: collate(sampler.sample(cfg.batch_size, rng), K), cfg.steps, opt)
