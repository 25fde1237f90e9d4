"""Return-conditioned rollouts and scoring against the reference returns."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import envs
from .envs import TaskSpec, Trajectory
from .model import DecisionModel, normalized_score
from .numeric import make_rng


class RolloutError(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"environment step {step} failed: {cause}")
        self.step = step


def rollout_episodes(policy, spec: TaskSpec, n: int, target_return: float, seed: int,
                     mode: str | None = None, expert: bool = False) -> list[Trajectory]:
    """Run ``n`` episodes in lockstep with one batched inference session.

    The return-to-go fed to the model starts at ``target_return`` and drops by
    every observed reward. With ``expert=True`` the scripted expert acts instead
    (``policy`` is ignored), which exercises the same loop.
    """
    if not np.isfinite(target_return):
        raise ValueError("target_return must be finite")
    rngs = [make_rng(seed, spec.task_id, 100 + i) for i in range(n)]
    states = [envs.reset(spec, r) for r in rngs]
    sess = None if expert else policy.new_inference(n, mode)
    rtg = np.full(n, float(target_return))
    done = np.zeros(n, dtype=bool)
    goal = np.zeros(n, dtype=bool)
    obs_log = [[] for _ in range(n)]
    act_log = [[] for _ in range(n)]
    rew_log = [[] for _ in range(n)]
    for t in range(spec.horizon):
        obs = np.stack([envs.observe(s, spec) for s in states])
        if expert:
            acts = np.array([[envs.scripted_expert(s, spec)] for s in states])
        else:
            acts = sess.act(rtg, obs, np.full(n, t))
            sess.record(acts)
        for i in np.flatnonzero(~done):
            try:
                states[i], r, d, g = envs.env_step(states[i], float(acts[i, 0]), spec)
            except Exception as exc:  # noqa: BLE001 - re-raised with the step index
                raise RolloutError(t, exc) from exc
            obs_log[i].append(obs[i])
            act_log[i].append(acts[i])
            rew_log[i].append(r)
            rtg[i] -= r
            done[i], goal[i] = d, bool(g)
        if done.all():
            break
    return [Trajectory(np.array(obs_log[i]), np.array(act_log[i], dtype=float),
                       np.array(rew_log[i]), bool(goal[i]), spec.task_id) for i in range(n)]


def rollout_episode(policy, spec: TaskSpec, target_return: float, seed: int = 0,
                    mode: str | None = None) -> tuple[Trajectory, float]:
    traj = rollout_episodes(policy, spec, 1, target_return, seed, mode)[0]
    return traj, float(traj.rewards.sum())


@dataclass
class EvalResult:
    task_id: int
    scores: np.ndarray
    returns: np.ndarray
    successes: np.ndarray
    seed: int

    @property
    def mean_score(self) -> float:
        return float(self.scores.mean())

    @property
    def std_score(self) -> float:
        return float(self.scores.std())

    @property
    def success_rate(self) -> float:
        return float(self.successes.mean())


def evaluate(model: DecisionModel | None, meta, episodes: int = 20, seed: int = 0,
             mode: str | None = None, expert: bool = False) -> EvalResult:
    """Normalised score and success over ``episodes`` rollouts on the task in ``meta``."""
    spec = meta.spec
    trajs = rollout_episodes(model, spec, episodes, meta.expert_return, seed, mode, expert=expert)
    rets = envs.returns_of(trajs)
    scores = np.array([normalized_score(r, meta.random_return, meta.expert_return) for r in rets])
    return EvalResult(spec.task_id, scores, rets, np.array([t.success for t in trajs]), seed)
