import numpy as np
import pytest

from drwkv import numeric as nc
from drwkv.model import DecisionModel, ModelConfig
from drwkv.train import AdamW, SegmentSampler, TrainConfig, collate, segments_of, train_offline, window


def test_adamw_first_step_is_lr_times_sign():
    p = nc.param(np.array([1.0, -2.0, 0.5]))
    opt = AdamW([p], lr=0.1, weight_decay=0.0, grad_clip=None)
    with nc.Tape() as tape:
        loss = nc.sum(p * np.array([3.0, -1.0, 0.0]))
    opt.step(nc.backward(tape, loss))
    assert np.allclose(p.data, [0.9, -1.9, 0.5])


def test_adamw_decays_matrices_only():
    w, b = nc.param(np.ones((2, 2))), nc.param(np.ones(2))
    opt = AdamW([w, b], lr=0.1, weight_decay=0.5, grad_clip=None)
    with nc.Tape() as tape:
        loss = nc.sum(w * 0.0) + nc.sum(b * 0.0)
    opt.step(nc.backward(tape, loss))
    assert np.allclose(w.data, 0.95) and np.array_equal(b.data, np.ones(2))


def test_clipping_and_warmup():
    p = nc.param(np.zeros(2))
    opt = AdamW([p], lr=1.0, weight_decay=0.0, grad_clip=0.25, warmup=4)
    with nc.Tape() as tape:
        loss = nc.sum(p * np.array([30.0, 40.0]))
    assert opt.step(nc.backward(tape, loss)) == pytest.approx(50.0)
    assert np.allclose(p.data, -0.25)


def test_segments_cover_episode(small_data):
    _, eps = small_data
    ep = eps[0]
    segs = segments_of(ep, 7)
    assert sum(len(s) for s in segs) == len(ep)
    assert np.array_equal(np.concatenate([s.timesteps for s in segs]), np.arange(len(ep)))
    assert segs[0].rtg[0, 0] == pytest.approx(ep.rewards.sum())


def test_collate_pads_and_masks(small_data):
    _, eps = small_data
    ep = eps[0]
    segs = [window(ep, 0, 5), window(ep, len(ep) - 2, 5)]
    b = collate(segs, 5)
    assert b.mask.sum(1).tolist() == [5, 2]
    assert np.all(b.states[1, 2:] == 0) and np.all(b.timesteps[1, 2:] == 0)
    assert b.timesteps[1, :2].tolist() == [len(ep) - 2, len(ep) - 1]


def test_sampler_is_deterministic(small_data):
    _, eps = small_data
    s = SegmentSampler(eps, 6)
    a = collate(s.sample(8, nc.make_rng(1)), 6)
    b = collate(s.sample(8, nc.make_rng(1)), 6)
    assert all(np.array_equal(getattr(a, f), getattr(b, f)) for f in ("rtg", "states", "actions", "timesteps"))
    with pytest.raises(ValueError):
        SegmentSampler([], 6)


def test_train_offline_reproducible_and_decreasing(small_data):
    _, eps = small_data
    cfg = ModelConfig(family="drwkv4", layers=1, width=16, heads=2, context=6)
    tc = TrainConfig(steps=60, batch_size=8, lr=1e-3, warmup=10, seed=3)
    m1, m2 = DecisionModel(cfg), DecisionModel(cfg)
    l1, l2 = train_offline(m1, eps, tc), train_offline(m2, eps, tc)
    assert l1 == l2
    assert np.mean(l1[-10:]) < np.mean(l1[:10])
