import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from drwkv import envs
from drwkv.envs import TaskSpec, ValveState, env_step, scripted_expert, wrap
from drwkv.numeric import make_rng


@given(st.floats(-50, 50, allow_nan=False))
def test_wrap_periodic_and_in_range(theta):
    w = wrap(theta)
    assert -math.pi < w <= math.pi
    assert abs(wrap(theta + 2 * math.pi) - w) < 1e-12 or abs(abs(w) - math.pi) < 1e-12


def test_wrap_boundary():
    assert wrap(math.pi) == math.pi
    assert wrap(-math.pi) == math.pi


def test_taskspec_validation():
    with pytest.raises(ValueError):
        TaskSpec(0, target=4.0)
    with pytest.raises(ValueError):
        TaskSpec(0, target=0.0, hold_steps=10, horizon=5)


def test_equilibrium_only_advances_step():
    spec = TaskSpec(0, target=1.0)
    s, _, done, g = env_step(ValveState(theta=0.3), 0.0, spec)
    assert (s.theta, s.omega, s.step) == (0.3, 0.0, 1)
    assert not done and g == 0


def test_goal_after_hold_steps():
    spec = TaskSpec(0, target=0.5)
    s = ValveState(theta=0.5)
    gs = []
    for _ in range(spec.hold_steps):
        s, r, done, g = env_step(s, 0.0, spec)
        gs.append(g)
    assert gs == [0] * (spec.hold_steps - 1) + [1]
    assert done and r == pytest.approx(5.0)


@given(seed=st.integers(0, 10**6))
def test_damping_never_speeds_up_coasting_valve(seed):
    rng = make_rng(seed)
    spec = TaskSpec(0, target=0.0, damping=float(rng.uniform(0.05, 0.5)), inertia=float(rng.uniform(0.05, 0.2)),
                    horizon=200)
    s = ValveState(theta=float(rng.uniform(-3, 3)), omega=float(rng.normal(0, 5)))
    for _ in range(100):
        s2, *_ = env_step(s, 0.0, spec)
        assert abs(s2.omega) <= abs(s.omega)
        s = s2


def test_out_of_range_torque_is_clipped_and_counted():
    spec = TaskSpec(0, target=0.0)
    before = envs.DIAGNOSTICS.clipped_torques
    a, *_ = env_step(ValveState(), 3.0, spec)
    b, *_ = env_step(ValveState(), 1.0, spec)
    assert a == b
    assert envs.DIAGNOSTICS.clipped_torques == before + 1


def test_expert_signs():
    spec = TaskSpec(0, target=math.pi / 2)
    assert scripted_expert(ValveState(theta=spec.target), spec) == 0.0
    assert scripted_expert(ValveState(theta=0.0), spec) == 1.0
    assert scripted_expert(ValveState(theta=math.pi), spec) == -1.0


def test_expert_always_succeeds(suite):
    for spec in suite:
        rng = make_rng(5, spec.task_id)
        assert all(envs.run_episode(spec, envs.expert_policy, rng).success for _ in range(100))


def test_noisy_dataset_success_and_refs(suite):
    for spec in suite:
        eps, meta = envs.generate_dataset(spec, 500 if spec.task_id == 0 else 50, 0.1, 7)
        assert meta.expert_return > meta.random_return
        assert meta.success_rate >= 0.95
        assert all(len(e) <= spec.horizon for e in eps)
        assert min(meta.state_std) >= envs.STD_FLOOR


def test_dataset_round_trip_and_regeneration(suite, tmp_path):
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    eps, meta = envs.generate_dataset(suite[3], 4, 0.1, 11, p1)
    meta2, eps2 = envs.load_dataset(p1)
    assert meta2 == meta and eps2 == eps
    envs.generate_dataset(suite[3], 4, 0.1, 11, p2)
    assert p1.read_bytes() == p2.read_bytes()
    envs.generate_dataset(suite[3], 1, 0.0, 0, p1)
    envs.generate_dataset(suite[3], 1, 0.0, 0, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_generate_dataset_errors(suite, tmp_path):
    with pytest.raises(ValueError):
        envs.generate_dataset(suite[0], 0, 0.1, 0)
    with pytest.raises(ValueError):
        envs.generate_dataset(suite[0], 1, -0.1, 0)
    with pytest.raises(OSError, match="missing"):
        envs.generate_dataset(suite[0], 1, 0.1, 0, tmp_path / "missing" / "x.jsonl")


def test_suite_properties(suite):
    assert len(suite) == 10
    assert envs.default_task_suite() == suite
    assert all(abs(s.target) <= math.pi for s in suite)
    keys = {(s.target, s.damping, s.inertia) for s in suite}
    assert len(keys) == 10


@given(seed=st.integers(0, 10**6), task=st.integers(0, 9))
def test_reward_bound_under_random_torques(seed, task):
    spec = envs.default_task_suite()[task]
    traj = envs.run_episode(spec, envs.random_policy, make_rng(seed))
    wmax = np.abs(traj.states[:, 2]).max()
    # the final step's velocity is not in the observations, so bound it by one more full-torque step
    wmax = wmax + envs.DT * spec.torque_limit / spec.inertia
    assert np.all(traj.rewards <= 5.0)
    assert np.all(traj.rewards >= -(math.pi + 0.01 * wmax ** 2 + 0.001))
    assert len(traj.states) == len(traj.actions) == len(traj.rewards) <= spec.horizon
