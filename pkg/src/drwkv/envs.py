"""One-dimensional valve-turning tasks, a scripted expert, and offline datasets.

Each task asks for the valve to be turned to a target angle and held there.
Tasks differ in target, damping and inertia. Observations are
``(sin θ, cos θ, θ̇, sin θ_g, cos θ_g)``; the action is one normalised torque.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .numeric import make_rng

DT = 0.05
OBS_DIM = 5
ACT_DIM = 1
FORMAT_VERSION = 1
RANDOM_REF_EPISODES = 100
STD_FLOOR = 1e-6

# saturated PD gains of the scripted expert, frozen after the success sweep
EXPERT_KP = 3.0
EXPERT_KD = 0.6


def wrap(theta):
    """Wrap to (-π, π]. In-range angles pass through untouched."""
    theta = np.asarray(theta, dtype=float)
    out = np.mod(theta + math.pi, 2 * math.pi) - math.pi
    out = np.where(out == -math.pi, math.pi, out)
    out = np.where((theta > -math.pi) & (theta <= math.pi), theta, out)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    target: float
    damping: float = 0.2
    inertia: float = 0.1
    torque_limit: float = 1.0
    tolerance: float = 0.1
    hold_steps: int = 5
    horizon: int = 60

    def __post_init__(self):
        if abs(self.target) > math.pi:
            raise ValueError(f"target {self.target} outside [-π, π]")
        if not self.horizon >= self.hold_steps >= 1:
            raise ValueError("need horizon >= hold_steps >= 1")


@dataclass
class ValveState:
    theta: float = 0.0
    omega: float = 0.0
    step: int = 0
    hold: int = 0  # consecutive in-tolerance steps so far


@dataclass
class Trajectory:
    states: np.ndarray   # (L, OBS_DIM)
    actions: np.ndarray  # (L, ACT_DIM)
    rewards: np.ndarray  # (L,)
    success: bool
    task_id: int

    def __len__(self) -> int:
        return len(self.rewards)

    def __eq__(self, other) -> bool:
        return (isinstance(other, Trajectory) and self.success == other.success
                and self.task_id == other.task_id
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("states", "actions", "rewards")))


@dataclass
class DatasetMeta:
    task: dict
    episodes: int
    state_mean: list
    state_std: list
    action_mean: list
    action_std: list
    expert_return: float
    random_return: float
    success_rate: float
    noise: float
    seed: int
    format_version: int = FORMAT_VERSION

    @property
    def spec(self) -> TaskSpec:
        return TaskSpec(**self.task)


@dataclass
class Diagnostics:
    clipped_torques: int = 0


DIAGNOSTICS = Diagnostics()


def observe(s: ValveState, spec: TaskSpec) -> np.ndarray:
    return np.array([math.sin(s.theta), math.cos(s.theta), s.omega,
                     math.sin(spec.target), math.cos(spec.target)])


def reset(spec: TaskSpec, rng: np.random.Generator) -> ValveState:
    return ValveState(theta=float(rng.uniform(-0.2, 0.2)), omega=float(rng.uniform(-0.1, 0.1)))


def env_step(s: ValveState, torque: float, spec: TaskSpec):
    """Advance one step; returns ``(state, reward, done, goal)``."""
    torque = float(torque)
    if not -1.0 <= torque <= 1.0:
        DIAGNOSTICS.clipped_torques += 1
        torque = min(1.0, max(-1.0, torque))
    omega = s.omega + DT * (torque * spec.torque_limit - spec.damping * s.omega) / spec.inertia
    theta = wrap(s.theta + DT * omega)
    err = abs(wrap(theta - spec.target))
    hold = s.hold + 1 if err < spec.tolerance else 0
    goal = hold >= spec.hold_steps
    reward = -err - 0.01 * omega * omega - 0.001 * torque * torque + (5.0 if goal else 0.0)
    new = ValveState(theta=theta, omega=omega, step=s.step + 1, hold=hold)
    done = goal or new.step >= spec.horizon
    return new, reward, done, int(goal)


def scripted_expert(s: ValveState, spec: TaskSpec) -> float:
    return float(np.clip(EXPERT_KP * wrap(spec.target - s.theta) - EXPERT_KD * s.omega, -1.0, 1.0))


def run_episode(spec: TaskSpec, policy, rng: np.random.Generator, noise: float = 0.0) -> Trajectory:
    """Roll out ``policy(state, spec, rng) -> torque`` with optional Gaussian torque noise."""
    s = reset(spec, rng)
    obs, acts, rews = [], [], []
    done, goal = False, 0
    while not done:
        a = policy(s, spec, rng)
        if noise > 0:
            a = float(np.clip(a + rng.normal(0.0, noise), -1.0, 1.0))
        obs.append(observe(s, spec))
        acts.append([a])
        s, r, done, goal = env_step(s, a, spec)
        rews.append(r)
    return Trajectory(np.array(obs), np.array(acts, dtype=float), np.array(rews), bool(goal), spec.task_id)


def expert_policy(s, spec, rng):
    return scripted_expert(s, spec)


def random_policy(s, spec, rng):
    return float(rng.uniform(-1.0, 1.0))


def default_task_suite(seed: int = 2024) -> list[TaskSpec]:
    """Ten targets in alternating directions with ±20% damping/inertia jitter."""
    degrees = [30, -60, 90, -120, 150, -30, 60, -90, 120, -150]
    rng = make_rng(seed)
    jitter = rng.uniform(0.8, 1.2, size=(len(degrees), 2))
    return [TaskSpec(task_id=i, target=math.radians(d), damping=0.2 * jitter[i, 0],
                     inertia=0.1 * jitter[i, 1])
            for i, d in enumerate(degrees)]


def returns_of(trajs: list[Trajectory]) -> np.ndarray:
    return np.array([t.rewards.sum() for t in trajs])


def generate_dataset(spec: TaskSpec, n_episodes: int, noise: float, seed: int,
                     path: str | os.PathLike | None = None):
    """Expert episodes with exploration noise plus reference returns.

    Returns ``(episodes, meta)`` and writes the dataset file when ``path`` is given.
    """
    if n_episodes < 1 or noise < 0:
        raise ValueError("need n_episodes >= 1 and noise >= 0")
    rng = make_rng(seed, spec.task_id, 0)
    episodes = [run_episode(spec, expert_policy, rng, noise) for _ in range(n_episodes)]
    rrng = make_rng(seed, spec.task_id, 1)
    randoms = [run_episode(spec, random_policy, rrng) for _ in range(RANDOM_REF_EPISODES)]
    S = np.concatenate([e.states for e in episodes])
    A = np.concatenate([e.actions for e in episodes])
    meta = DatasetMeta(
        task=asdict(spec), episodes=n_episodes,
        state_mean=S.mean(0).tolist(), state_std=np.maximum(S.std(0), STD_FLOOR).tolist(),
        action_mean=A.mean(0).tolist(), action_std=np.maximum(A.std(0), STD_FLOOR).tolist(),
        expert_return=float(returns_of(episodes).mean()),
        random_return=float(returns_of(randoms).mean()),
        success_rate=float(np.mean([e.success for e in episodes])),
        noise=float(noise), seed=int(seed),
    )
    if path is not None:
        save_dataset(path, meta, episodes)
    return episodes, meta


# ---------------------------------------------------------------- file format

def _fmt(x) -> str:
    if isinstance(x, dict):
        return "{" + ",".join(f"{json.dumps(k)}:{_fmt(v)}" for k, v in x.items()) + "}"
    if isinstance(x, (list, tuple)):
        return "[" + ",".join(_fmt(v) for v in x) + "]"
    if isinstance(x, np.ndarray):
        return _fmt(x.tolist())
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return json.dumps(x)


def save_dataset(path, meta: DatasetMeta, episodes: list[Trajectory]) -> None:
    path = Path(path)
    lines = [_fmt({"meta": asdict(meta)})]
    for e in episodes:
        lines.append(_fmt({"task_id": e.task_id, "states": e.states, "actions": e.actions,
                           "rewards": e.rewards, "success": e.success}))
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write dataset {path}: {exc}") from exc


def load_dataset(path):
    path = Path(path)
    try:
        with path.open(encoding="utf-8") as fh:
            meta = DatasetMeta(**json.loads(fh.readline())["meta"])
            episodes = []
            for line in fh:
                if not line.strip():
                    continue
                r = json.loads(line)
                episodes.append(Trajectory(
                    states=np.array(r["states"], dtype=float).reshape(-1, OBS_DIM),
                    actions=np.array(r["actions"], dtype=float).reshape(-1, ACT_DIM),
                    rewards=np.array(r["rewards"], dtype=float),
                    success=bool(r["success"]), task_id=int(r["task_id"])))
    except OSError as exc:
        raise OSError(f"cannot read dataset {path}: {exc}") from exc
    return meta, episodes


def dataset_path(root, task_id: int) -> Path:
    return Path(root) / f"valve_task{task_id:02d}.jsonl"
