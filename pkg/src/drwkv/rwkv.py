"""RWKV-4/5/6 time-mixing and channel-mixing sub-blocks.

Every mixer has two forms that must agree:

* a whole-sequence form on :class:`~drwkv.numeric.Tensor` inputs of shape
  ``(..., T, D)`` (differentiable, used for training), and
* a single-token step form on plain numpy arrays of shape ``(..., D)`` that
  threads a constant-size :class:`LayerState` (used for inference).

Token shift follows ``mu * x_t + (1 - mu) * x_{t-1}`` with a zero vector before
the first token. Weights are stored input-major, so projections read ``x @ W``.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np
from scipy.special import expit

from . import numeric as nc
from .numeric import Tensor

GN_EPS = 1e-5
LN_EPS = 1e-5


# ---------------------------------------------------------------- parameters

@dataclass
class TimeMixParamsV4:
    mu_k: Tensor
    mu_v: Tensor
    mu_r: Tensor
    W_k: Tensor
    W_v: Tensor
    W_r: Tensor
    W_o: Tensor
    omega: Tensor  # decay w = exp(omega) > 0
    u: Tensor


@dataclass
class TimeMixParamsV5:
    mu_k: Tensor
    mu_v: Tensor
    mu_r: Tensor
    mu_g: Tensor
    W_k: Tensor
    W_v: Tensor
    W_r: Tensor
    W_g: Tensor
    W_o: Tensor
    omega: Tensor  # decay w = exp(-exp(omega)) in (0, 1)
    u: Tensor
    gn_gain: Tensor
    gn_bias: Tensor
    heads: int


@dataclass
class TimeMixParamsV6(TimeMixParamsV5):
    mu_w: Tensor = None
    mu_x: Tensor = None
    A_x: Tensor = None  # D x r, shared by the five token-shift adapters
    B_r: Tensor = None
    B_k: Tensor = None
    B_v: Tensor = None
    B_g: Tensor = None
    B_w: Tensor = None
    A_decay: Tensor = None  # D x r_w
    B_decay: Tensor = None  # r_w x D


@dataclass
class ChannelMixParams:
    W_k: Tensor
    W_v: Tensor
    W_r: Tensor
    mu_k: Tensor | None = None  # None disables token shift (attention baseline)
    mu_r: Tensor | None = None


@dataclass
class BlockParams:
    family: str
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    tmix: object
    cmix: ChannelMixParams


SHIFT_ADAPTERS = ("r", "k", "v", "g", "w")


def named_tensors(obj, prefix: str = "") -> dict[str, Tensor]:
    """Flatten a parameter dataclass into ``{canonical.name: Tensor}``."""
    out: dict[str, Tensor] = {}
    for f in fields(obj):
        val = getattr(obj, f.name)
        if isinstance(val, Tensor):
            out[prefix + f.name] = val
        elif hasattr(val, "__dataclass_fields__"):
            out.update(named_tensors(val, f"{prefix}{f.name}."))
    return out


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _ramp(D):
    return np.linspace(0.0, 1.0, D) if D > 1 else np.ones(1)


def init_time_mix(family: str, D: int, heads: int, rng: np.random.Generator,
                  lora_rank: int | None = None, decay_rank: int | None = None):
    p = nc.param
    ramp = _ramp(D)
    if family == "v4":
        return TimeMixParamsV4(
            mu_k=p(ramp), mu_v=p(ramp[::-1] * 0.5 + 0.5), mu_r=p(0.5 * ramp),
            W_k=p(_uniform(rng, (D, D), D)), W_v=p(_uniform(rng, (D, D), D)),
            W_r=p(_uniform(rng, (D, D), D)), W_o=p(_uniform(rng, (D, D), D)),
            omega=p(np.linspace(-1.0, 1.0, D)),  # w log-uniform over [1/e, e]
            u=p(0.5 * (1.0 - ramp)),
        )
    if D % heads:
        raise ValueError(f"width {D} not divisible by {heads} heads")
    decay = np.linspace(0.6, 0.999, D)
    base = dict(
        mu_k=p(ramp), mu_v=p(ramp[::-1] * 0.5 + 0.5), mu_r=p(0.5 * ramp), mu_g=p(0.5 * ramp),
        W_k=p(_uniform(rng, (D, D), D)), W_v=p(_uniform(rng, (D, D), D)),
        W_r=p(_uniform(rng, (D, D), D)), W_g=p(_uniform(rng, (D, D), D)),
        W_o=p(_uniform(rng, (D, D), D)),
        omega=p(np.log(-np.log(decay))),
        u=p(0.5 * (1.0 - ramp)),
        gn_gain=p(np.ones(D)), gn_bias=p(np.zeros(D)),
        heads=heads,
    )
    if family == "v5":
        return TimeMixParamsV5(**base)
    if family != "v6":
        raise ValueError(f"unknown RWKV family {family!r}")
    r = lora_rank or max(1, D // 16)
    rw = decay_rank or max(1, D // 8)
    extra = {f"B_{q}": p(np.zeros((r, D))) for q in SHIFT_ADAPTERS}
    return TimeMixParamsV6(
        **base, mu_w=p(ramp), mu_x=p(0.5 * np.ones(D)),
        A_x=p(_uniform(rng, (D, r), D)), **extra,
        A_decay=p(_uniform(rng, (D, rw), D)), B_decay=p(np.zeros((rw, D))),
    )


def init_channel_mix(D: int, d_ff: int, rng: np.random.Generator, shift: bool = True) -> ChannelMixParams:
    p = nc.param
    ramp = _ramp(D)
    return ChannelMixParams(
        W_k=p(_uniform(rng, (D, d_ff), D)), W_v=p(_uniform(rng, (d_ff, D), d_ff)),
        W_r=p(_uniform(rng, (D, D), D)),
        mu_k=p(ramp) if shift else None, mu_r=p(ramp) if shift else None,
    )


def init_block(family: str, D: int, heads: int, rng: np.random.Generator,
               d_ff: int | None = None) -> BlockParams:
    p = nc.param
    d_ff = d_ff or 4 * D
    if family == "attn":
        from .attention import init_attention
        tmix = init_attention(D, heads, rng)
    else:
        tmix = init_time_mix(family, D, heads, rng)
    return BlockParams(
        family=family,
        ln1_gain=p(np.ones(D)), ln1_bias=p(np.zeros(D)),
        ln2_gain=p(np.ones(D)), ln2_bias=p(np.zeros(D)),
        tmix=tmix, cmix=init_channel_mix(D, d_ff, rng, shift=family != "attn"),
    )


# ---------------------------------------------------------------- state

@dataclass
class LayerState:
    """Inference state of one block; its size never depends on sequence length."""

    tm_prev: np.ndarray
    cm_prev: np.ndarray
    aa: np.ndarray | None = None  # v4 numerator accumulator
    bb: np.ndarray | None = None  # v4 denominator accumulator
    pp: np.ndarray | None = None  # v4 running max exponent
    S: np.ndarray | None = None   # v5/v6 per-head n x n state

    def arrays(self) -> list[np.ndarray]:
        return [a for a in (self.tm_prev, self.cm_prev, self.aa, self.bb, self.pp, self.S)
                if a is not None]


@dataclass
class RecurrentState:
    layers: list[LayerState]

    @property
    def nbytes(self) -> int:
        return int(np.sum([a.nbytes for s in self.layers for a in s.arrays()]))

    def to_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(a).tobytes() for s in self.layers for a in s.arrays())


def init_layer_state(block: BlockParams, batch: tuple[int, ...] = (), dtype=np.float64) -> LayerState:
    D = block.ln1_gain.shape[0]
    z = np.zeros(batch + (D,), dtype)
    if block.family == "v4":
        return LayerState(z, z.copy(), aa=z.copy(), bb=z.copy(), pp=np.full_like(z, -np.inf))
    if block.family in ("v5", "v6"):
        H = block.tmix.heads
        n = D // H
        return LayerState(z, z.copy(), S=np.zeros(batch + (H, n, n), dtype))
    raise ValueError(f"family {block.family!r} has no recurrent state")


def init_state(blocks: list[BlockParams], batch: tuple[int, ...] = (), dtype=np.float64) -> RecurrentState:
    return RecurrentState([init_layer_state(b, batch, dtype) for b in blocks])


# ---------------------------------------------------------------- oracles

def wkv_direct_v4(k: np.ndarray, v: np.ndarray, w: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Quadratic-time summation form of the RWKV-4 WKV for (T, D) inputs.

    ``w`` is the positive decay. Exponents are shifted by their per-output,
    per-channel maximum, which leaves every ratio unchanged.
    """
    k, v = np.asarray(k), np.asarray(v)
    T = k.shape[0]
    out = np.empty_like(v, dtype=np.result_type(k, v, w))
    for t in range(T):
        lags = (t - 1 - np.arange(t))[:, None]
        expo = np.concatenate([-lags * w + k[:t], (u + k[t])[None]], axis=0)
        expo = expo - expo.max(axis=0)
        e = np.exp(expo)
        out[t] = (e * v[: t + 1]).sum(axis=0) / e.sum(axis=0)
    return out


# ---------------------------------------------------------------- sequence forms

def _lerp(xx, dx, mu):
    return xx + dx * mu


def _group_norm(y: Tensor, heads: int, gain: Tensor, bias: Tensor) -> Tensor:
    shp = y.shape
    yh = nc.reshape(y, shp[:-1] + (heads, shp[-1] // heads))
    yn = nc.reshape(nc.layer_norm(yh, eps=GN_EPS), shp)
    return yn * gain + bias


def time_mix_v4(x: Tensor, p: TimeMixParamsV4) -> Tensor:
    xx = nc.token_shift(x)
    dx = x - xx
    k = _lerp(xx, dx, p.mu_k) @ p.W_k
    v = _lerp(xx, dx, p.mu_v) @ p.W_v
    r = _lerp(xx, dx, p.mu_r) @ p.W_r
    wkv = nc.wkv4(k, v, nc.exp(p.omega), p.u)
    return (nc.sigmoid(r) * wkv) @ p.W_o


def _heads(t: Tensor, H: int) -> Tensor:
    return nc.reshape(t, t.shape[:-1] + (H, t.shape[-1] // H))


def time_mix_v5(x: Tensor, p: TimeMixParamsV5) -> Tensor:
    H = p.heads
    D = x.shape[-1]
    xx = nc.token_shift(x)
    dx = x - xx
    r = _lerp(xx, dx, p.mu_r) @ p.W_r
    k = _lerp(xx, dx, p.mu_k) @ p.W_k
    v = _lerp(xx, dx, p.mu_v) @ p.W_v
    g = nc.silu(_lerp(xx, dx, p.mu_g) @ p.W_g)
    w = nc.reshape(nc.exp(-nc.exp(p.omega)), (H, D // H))
    y = nc.wkv_matrix(_heads(r, H), _heads(k, H), _heads(v, H), w, nc.reshape(p.u, (H, D // H)))
    y = nc.reshape(y, x.shape)
    return (_group_norm(y, H, p.gn_gain, p.gn_bias) * g) @ p.W_o


def time_mix_v6(x: Tensor, p: TimeMixParamsV6) -> Tensor:
    H = p.heads
    D = x.shape[-1]
    xx = nc.token_shift(x)
    dx = x - xx
    lo = nc.tanh(_lerp(xx, dx, p.mu_x) @ p.A_x)
    xs = {q: _lerp(xx, dx, getattr(p, f"mu_{q}") + lo @ getattr(p, f"B_{q}")) for q in SHIFT_ADAPTERS}
    r = xs["r"] @ p.W_r
    k = xs["k"] @ p.W_k
    v = xs["v"] @ p.W_v
    g = nc.silu(xs["g"] @ p.W_g)
    w = nc.exp(-nc.exp(p.omega + nc.tanh(xs["w"] @ p.A_decay) @ p.B_decay))
    y = nc.wkv_matrix(_heads(r, H), _heads(k, H), _heads(v, H), _heads(w, H),
                      nc.reshape(p.u, (H, D // H)))
    y = nc.reshape(y, x.shape)
    return (_group_norm(y, H, p.gn_gain, p.gn_bias) * g) @ p.W_o


def channel_mix(x: Tensor, p: ChannelMixParams) -> Tensor:
    if p.mu_k is None:
        xk = xr = x
    else:
        xx = nc.token_shift(x)
        dx = x - xx
        xk, xr = _lerp(xx, dx, p.mu_k), _lerp(xx, dx, p.mu_r)
    k = nc.square(nc.relu(xk @ p.W_k))
    return nc.sigmoid(xr @ p.W_r) * (k @ p.W_v)


_TIME_MIX = {"v4": time_mix_v4, "v5": time_mix_v5, "v6": time_mix_v6}


def block_parallel(x: Tensor, b: BlockParams) -> Tensor:
    if b.family == "attn":
        from .attention import causal_attention
        mixer = causal_attention
    else:
        mixer = _TIME_MIX[b.family]
    x = x + mixer(nc.layer_norm(x, b.ln1_gain, b.ln1_bias, LN_EPS), b.tmix)
    return x + channel_mix(nc.layer_norm(x, b.ln2_gain, b.ln2_bias, LN_EPS), b.cmix)


# ---------------------------------------------------------------- step forms

def _np_ln(x, g, b, eps=LN_EPS):
    # ufunc reductions skip ndarray.mean's Python-level dispatch; this runs once per token
    inv_d = 1.0 / x.shape[-1]
    xc = x - np.add.reduce(x, axis=-1, keepdims=True) * inv_d
    var = np.add.reduce(xc * xc, axis=-1, keepdims=True) * inv_d
    return xc / np.sqrt(var + eps) * g + b


def _np_gn(y, H, g, b):
    shp = y.shape
    yh = y.reshape(shp[:-1] + (H, shp[-1] // H))
    mu = yh.mean(axis=-1, keepdims=True)
    yc = yh - mu
    var = (yc * yc).mean(axis=-1, keepdims=True)
    return (yc / np.sqrt(var + GN_EPS)).reshape(shp) * g + b


def time_mix_v4_step(x: np.ndarray, state: LayerState, p: TimeMixParamsV4):
    prev = state.tm_prev
    dx = x - prev
    k = (prev + dx * p.mu_k.data) @ p.W_k.data
    v = (prev + dx * p.mu_v.data) @ p.W_v.data
    r = (prev + dx * p.mu_r.data) @ p.W_r.data
    aa, bb, pp = state.aa, state.bb, state.pp
    ww = p.u.data + k
    q = np.maximum(pp, ww)
    e1, e2 = np.exp(pp - q), np.exp(ww - q)
    wkv = (e1 * aa + e2 * v) / (e1 * bb + e2)
    ww = pp - np.exp(p.omega.data)
    q = np.maximum(ww, k)
    e1, e2 = np.exp(ww - q), np.exp(k - q)
    new = replace(state, tm_prev=x, aa=e1 * aa + e2 * v, bb=e1 * bb + e2, pp=q)
    return (expit(r) * wkv) @ p.W_o.data, new


def _matrix_step(r, k, v, w, u, S, H):
    shp = r.shape
    hs = shp[:-1] + (H, shp[-1] // H)
    r, k, v, w = r.reshape(hs), k.reshape(hs), v.reshape(hs), w.reshape(hs)
    u = u.reshape(H, -1)
    bonus = (r * u * k).sum(axis=-1, keepdims=True)
    y = bonus * v + (r[..., None, :] @ S)[..., 0, :]
    S = w[..., :, None] * S + k[..., :, None] * v[..., None, :]
    return y.reshape(shp), S


def time_mix_v5_step(x: np.ndarray, state: LayerState, p: TimeMixParamsV5):
    prev = state.tm_prev
    dx = x - prev
    r = (prev + dx * p.mu_r.data) @ p.W_r.data
    k = (prev + dx * p.mu_k.data) @ p.W_k.data
    v = (prev + dx * p.mu_v.data) @ p.W_v.data
    gx = (prev + dx * p.mu_g.data) @ p.W_g.data
    g = gx * expit(gx)
    w = np.exp(-np.exp(p.omega.data))
    y, S = _matrix_step(r, k, v, np.broadcast_to(w, r.shape), p.u.data, state.S, p.heads)
    out = (_np_gn(y, p.heads, p.gn_gain.data, p.gn_bias.data) * g) @ p.W_o.data
    return out, replace(state, tm_prev=x, S=S)


def time_mix_v6_step(x: np.ndarray, state: LayerState, p: TimeMixParamsV6):
    prev = state.tm_prev
    dx = x - prev
    lo = np.tanh((prev + dx * p.mu_x.data) @ p.A_x.data)
    xs = {q: prev + dx * (getattr(p, f"mu_{q}").data + lo @ getattr(p, f"B_{q}").data)
          for q in SHIFT_ADAPTERS}
    r = xs["r"] @ p.W_r.data
    k = xs["k"] @ p.W_k.data
    v = xs["v"] @ p.W_v.data
    gx = xs["g"] @ p.W_g.data
    g = gx * expit(gx)
    w = np.exp(-np.exp(p.omega.data + np.tanh(xs["w"] @ p.A_decay.data) @ p.B_decay.data))
    y, S = _matrix_step(r, k, v, w, p.u.data, state.S, p.heads)
    out = (_np_gn(y, p.heads, p.gn_gain.data, p.gn_bias.data) * g) @ p.W_o.data
    return out, replace(state, tm_prev=x, S=S)


def channel_mix_step(x: np.ndarray, state: LayerState, p: ChannelMixParams):
    if p.mu_k is None:
        xk = xr = x
    else:
        prev = state.cm_prev
        dx = x - prev
        xk = prev + dx * p.mu_k.data
        xr = prev + dx * p.mu_r.data
    k = np.maximum(xk @ p.W_k.data, 0.0)
    out = expit(xr @ p.W_r.data) * ((k * k) @ p.W_v.data)
    return out, (None if state is None else replace(state, cm_prev=x))


_TIME_MIX_STEP = {"v4": time_mix_v4_step, "v5": time_mix_v5_step, "v6": time_mix_v6_step}


def block_step(x: np.ndarray, state: LayerState, b: BlockParams):
    h, state = _TIME_MIX_STEP[b.family](_np_ln(x, b.ln1_gain.data, b.ln1_bias.data), state, b.tmix)
    x = x + h
    h, state = channel_mix_step(_np_ln(x, b.ln2_gain.data, b.ln2_bias.data), state, b.cmix)
    return x + h, state


def block_forward(x, b: BlockParams, mode: str = "parallel") -> np.ndarray:
    """Run one residual block over a (..., T, D) sequence in either mode."""
    if mode == "parallel":
        return block_parallel(nc.tensor(x), b).data
    if mode != "recurrent":
        raise ValueError(f"unknown mode {mode!r}")
    x = np.asarray(x)
    if b.family == "attn":
        from .attention import init_cache, block_step_cached
        cache = init_cache(b, x.shape[:-2], x.dtype)
        step = lambda xt: block_step_cached(xt, cache, b)  # noqa: E731
    else:
        st = [init_layer_state(b, x.shape[:-2], x.dtype)]

        def step(xt):
            y, st[0] = block_step(xt, st[0], b)
            return y
    return np.stack([step(x[..., t, :]) for t in range(x.shape[-2])], axis=-2)
