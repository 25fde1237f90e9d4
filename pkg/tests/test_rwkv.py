import numpy as np
import pytest
from hypothesis import given, strategies as st

from drwkv import numeric as nc
from drwkv import rwkv
from drwkv.numeric import make_rng, tensor
from drwkv.rwkv import (block_forward, channel_mix_step, init_block, init_layer_state, init_state,
                        time_mix_v4_step, wkv_direct_v4)


def unrolled_matrix_wkv(r, k, v, w, u):
    """y_t = r_t (diag(u) k_t^T v_t + sum_{i<t} (prod_{i<j<t} diag(w_j)) k_i^T v_i) for one head."""
    T, n = k.shape
    out = np.zeros((T, n))
    for t in range(T):
        acc = np.diag(u) @ np.outer(k[t], v[t])
        for i in range(t):
            decay = np.prod(w[i + 1:t], axis=0) if t > i + 1 else np.ones(n)
            acc = acc + np.diag(decay) @ np.outer(k[i], v[i])
        out[t] = r[t] @ acc
    return out


def test_wkv_direct_single_token_is_value(rng):
    k, v = rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
    assert np.allclose(wkv_direct_v4(k, v, np.ones(4), rng.normal(size=4)), v)


def test_wkv_direct_uniform_weights_average(rng):
    v = rng.normal(size=(6, 3))
    out = wkv_direct_v4(np.zeros((6, 3)), v, np.full(3, 1e-14), np.zeros(3))
    assert np.allclose(out, np.cumsum(v, 0) / np.arange(1, 7)[:, None], atol=1e-10)


def test_wkv4_scan_matches_direct(rng):
    k, v = rng.normal(size=(16, 8)), rng.normal(size=(16, 8))
    w, u = np.exp(rng.normal(size=8)), rng.normal(size=8)
    assert np.abs(nc.wkv4(tensor(k), tensor(v), w, u).data - wkv_direct_v4(k, v, w, u)).max() < 1e-10


def test_time_mix_v4_step_matches_direct_oracle(rng):
    D, T = 8, 16
    p = rwkv.init_time_mix("v4", D, 1, rng)
    x = rng.normal(size=(T, D))
    st_ = init_layer_state(init_block("v4", D, 1, make_rng(0)))
    steps = []
    for t in range(T):
        y, st_ = time_mix_v4_step(x[t], st_, p)
        steps.append(y)
    prev = np.vstack([np.zeros(D), x[:-1]])
    mix = lambda mu: prev + (x - prev) * mu.data  # noqa: E731
    k, v, r = mix(p.mu_k) @ p.W_k.data, mix(p.mu_v) @ p.W_v.data, mix(p.mu_r) @ p.W_r.data
    wkv = wkv_direct_v4(k, v, np.exp(p.omega.data), p.u.data)
    ref = (1 / (1 + np.exp(-r)) * wkv) @ p.W_o.data
    assert np.abs(np.array(steps) - ref).max() < 1e-10


def test_time_mix_v4_zero_input_gives_zero(rng):
    D = 4
    p = rwkv.init_time_mix("v4", D, 1, rng)
    y, st_ = time_mix_v4_step(np.zeros(D), init_layer_state(init_block("v4", D, 1, rng)), p)
    assert np.array_equal(y, np.zeros(D))
    assert np.all(st_.bb > 0)


def test_v4_stability_with_large_keys(rng):
    T, D = 64, 6
    k = rng.uniform(40, 80, size=(T, D))
    v = rng.normal(size=(T, D))
    w, u = np.exp(rng.normal(size=D)), rng.normal(size=D)
    out = nc.wkv4(tensor(k), tensor(v), w, u).data
    assert np.all(np.isfinite(out))
    assert np.abs(out - wkv_direct_v4(k, v, w, u)).max() < 1e-9
    g = nc.param(k)
    with nc.Tape() as tape:
        loss = nc.sum(nc.wkv4(g, tensor(v), w, u))
    assert np.all(np.isfinite(nc.backward(tape, loss).of(g)))


@given(seed=st.integers(0, 10**6), T=st.integers(1, 12), per_step=st.booleans())
def test_matrix_scan_matches_unrolled_sum(seed, T, per_step):
    rng = make_rng(seed)
    H, n = 2, 3
    r, k, v = (rng.normal(size=(T, H, n)) for _ in range(3))
    w = rng.uniform(0.2, 1.0, size=(T, H, n) if per_step else (H, n))
    u = rng.normal(size=(H, n))
    out = nc.wkv_matrix(tensor(r), tensor(k), tensor(v), tensor(w), tensor(u)).data
    wf = np.broadcast_to(w, (T, H, n))
    for h in range(H):
        ref = unrolled_matrix_wkv(r[:, h], k[:, h], v[:, h], wf[:, h], u[h])
        assert np.abs(out[:, h] - ref).max() < 1e-10


def test_matrix_step_first_token_and_pure_accumulation(rng):
    H, n, T = 2, 4, 5
    S = np.zeros((H, n, n))
    ks, vs = rng.normal(size=(T, H * n)), rng.normal(size=(T, H * n))
    r0, u = rng.normal(size=H * n), rng.normal(size=H * n)
    y, _ = rwkv._matrix_step(r0, ks[0], vs[0], np.ones(H * n), u, S, H)
    rh, kh, vh, uh = (a.reshape(H, n) for a in (r0, ks[0], vs[0], u))
    expect = np.stack([rh[h] @ np.diag(uh[h]) @ np.outer(kh[h], vh[h]) for h in range(H)])
    assert np.allclose(y.reshape(H, n), expect)
    for t in range(T):
        _, S = rwkv._matrix_step(r0, ks[t], vs[t], np.ones(H * n), np.zeros(H * n), S, H)
    total = sum(np.einsum("hi,hj->hij", ks[t].reshape(H, n), vs[t].reshape(H, n)) for t in range(T))
    assert np.allclose(S, total)


def test_decay_range(rng):
    p5 = rwkv.init_time_mix("v5", 8, 2, rng)
    for om in np.linspace(-30.0, 3.0, 67):
        w = np.exp(-np.exp(om))
        assert 0.0 < w < 1.0
    w = np.exp(-np.exp(p5.omega.data))
    assert np.all((w > 0) & (w < 1))
    assert np.isclose(w.min(), 0.6) and np.isclose(w.max(), 0.999)


def _v6_with_base_of(p5, rng):
    p6 = rwkv.init_time_mix("v6", p5.W_k.shape[0], p5.heads, rng)
    for name in ("mu_k", "mu_v", "mu_r", "mu_g", "W_k", "W_v", "W_r", "W_g", "W_o", "omega", "u",
                 "gn_gain", "gn_bias"):
        getattr(p6, name).data = getattr(p5, name).data.copy()
    p6.mu_w.data = rng.uniform(size=p6.mu_w.shape)
    return p6


def test_v6_with_zero_adapters_is_v5_bitwise(rng):
    D, H = 8, 2
    p5 = rwkv.init_time_mix("v5", D, H, rng)
    p6 = _v6_with_base_of(p5, rng)
    x = rng.normal(size=(2, 9, D))
    a = rwkv.time_mix_v5(tensor(x), p5).data
    b = rwkv.time_mix_v6(tensor(x), p6).data
    assert a.tobytes() == b.tobytes()
    blk = init_block("v5", D, H, rng)
    s5, s6 = init_layer_state(blk), init_layer_state(blk)
    for t in range(9):
        y5, s5 = rwkv.time_mix_v5_step(x[0, t], s5, p5)
        y6, s6 = rwkv.time_mix_v6_step(x[0, t], s6, p6)
        assert y5.tobytes() == y6.tobytes()


def test_v6_decay_stays_in_unit_interval(rng):
    p6 = rwkv.init_time_mix("v6", 8, 2, rng)
    p6.B_decay.data = rng.normal(0, 3, size=p6.B_decay.shape)
    x = rng.normal(0, 5, size=(20, 8))
    st_ = init_layer_state(init_block("v6", 8, 2, rng))
    for t in range(20):
        _, st_ = rwkv.time_mix_v6_step(x[t], st_, p6)
        assert np.all(np.isfinite(st_.S))


def test_channel_mix_cases(rng):
    D = 6
    p = rwkv.init_channel_mix(D, 12, rng)
    p.W_k.data = -np.abs(p.W_k.data)
    x = np.abs(rng.normal(size=D))
    st_ = init_layer_state(init_block("v4", D, 1, rng))
    y, st2 = channel_mix_step(x, st_, p)
    assert np.array_equal(y, np.zeros(D))
    assert np.array_equal(st2.cm_prev, x)
    p = rwkv.init_channel_mix(D, 12, rng)
    x, prev = rng.normal(size=D), rng.normal(size=D)
    st_.cm_prev = prev
    y, _ = channel_mix_step(x, st_, p)
    xk = p.mu_k.data * x + (1 - p.mu_k.data) * prev
    xr = p.mu_r.data * x + (1 - p.mu_r.data) * prev
    ref = 1 / (1 + np.exp(-(xr @ p.W_r.data))) * (np.maximum(xk @ p.W_k.data, 0) ** 2 @ p.W_v.data)
    assert np.abs(y - ref).max() < 1e-12


@pytest.mark.parametrize("family", ["v4", "v5", "v6", "attn"])
def test_zero_weight_block_is_identity(family, rng):
    b = init_block(family, 8, 2, rng)
    for t in rwkv.named_tensors(b).values():
        t.data = np.zeros_like(t.data)
    x = rng.normal(size=(5, 8))
    assert np.array_equal(block_forward(x, b, "parallel"), x)
    assert np.array_equal(block_forward(x, b, "recurrent"), x)


@pytest.mark.parametrize("family", ["v4", "v5", "v6"])
@given(seed=st.integers(0, 10**6), T=st.sampled_from([1, 2, 7, 19]))
def test_block_modes_agree(family, seed, T):
    rng = make_rng(seed)
    b = init_block(family, 8, 2, rng)
    x = rng.normal(size=(2, T, 8))
    assert np.abs(block_forward(x, b, "parallel") - block_forward(x, b, "recurrent")).max() < 1e-8


@pytest.mark.parametrize("family", ["v4", "v5", "v6"])
def test_state_size_is_constant(family, rng):
    blocks = [init_block(family, 16, 2, rng) for _ in range(2)]
    sizes = {}
    for T in (1, 4096):
        state = init_state(blocks)
        x = rng.normal(size=(T, 16))
        for t in range(T):
            h = x[t]
            for i, b in enumerate(blocks):
                h, state.layers[i] = rwkv.block_step(h, state.layers[i], b)
        sizes[T] = len(state.to_bytes())
    assert sizes[1] == sizes[4096] == state.nbytes


def test_block_forward_rejects_unknown_mode(rng):
    with pytest.raises(ValueError):
        block_forward(np.zeros((2, 4)), init_block("v4", 4, 1, rng), "sideways")
