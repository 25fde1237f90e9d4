"""Causal multi-head self-attention: the token mixer of the DT baseline."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numeric as nc
from .numeric import Tensor


@dataclass
class AttentionParams:
    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    W_o: Tensor
    heads: int


def init_attention(D: int, heads: int, rng: np.random.Generator) -> AttentionParams:
    if D % heads:
        raise ValueError(f"width {D} not divisible by {heads} heads")
    b = 1.0 / np.sqrt(D)
    mk = lambda: nc.param(rng.uniform(-b, b, size=(D, D)))  # noqa: E731
    return AttentionParams(W_q=mk(), W_k=mk(), W_v=mk(), W_o=mk(), heads=heads)


def causal_attention(x: Tensor, p: AttentionParams) -> Tensor:
    """Full-sequence form for (..., T, D) inputs."""
    *lead, T, D = x.shape
    H = p.heads
    n = D // H

    def split(t):  # (..., T, D) -> (..., H, T, n)
        return nc.swapaxes(nc.reshape(t, (*lead, T, H, n)), -2, -3)

    q = split(x @ p.W_q)
    k = split(x @ p.W_k)
    v = split(x @ p.W_v)
    scores = (q @ nc.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(n))
    att = nc.masked_softmax(scores, np.tril(np.ones((T, T), dtype=bool)))
    y = nc.reshape(nc.swapaxes(att @ v, -2, -3), (*lead, T, D))
    return y @ p.W_o


@dataclass
class KVCache:
    """Per-rollout key/value store for one block; grows by one entry per token."""

    keys: np.ndarray    # (..., H, t, n)
    values: np.ndarray  # (..., H, t, n)
    cm_prev: np.ndarray | None = field(default=None, repr=False)

    @property
    def length(self) -> int:
        return self.keys.shape[-2]

    @property
    def nbytes(self) -> int:
        return self.keys.nbytes + self.values.nbytes


def init_cache(block, batch: tuple[int, ...] = (), dtype=np.float64) -> KVCache:
    p = block.tmix if hasattr(block, "tmix") else block
    D = p.W_q.shape[0]
    H = p.heads
    empty = np.zeros(batch + (H, 0, D // H), dtype)
    return KVCache(keys=empty, values=empty.copy())


def causal_attention_cached(x_t: np.ndarray, cache: KVCache, p: AttentionParams) -> np.ndarray:
    """Attend from one new token over every cached position, appending it first."""
    D = x_t.shape[-1]
    H = p.heads
    n = D // H
    hs = x_t.shape[:-1] + (H, 1, n)
    q = (x_t @ p.W_q.data).reshape(hs)
    cache.keys = np.concatenate([cache.keys, (x_t @ p.W_k.data).reshape(hs)], axis=-2)
    cache.values = np.concatenate([cache.values, (x_t @ p.W_v.data).reshape(hs)], axis=-2)
    s = (q @ np.swapaxes(cache.keys, -1, -2)) * (1.0 / np.sqrt(n))
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    y = (e / e.sum(axis=-1, keepdims=True)) @ cache.values
    return y.reshape(x_t.shape) @ p.W_o.data


def block_step_cached(x: np.ndarray, cache: KVCache, b) -> np.ndarray:
    from .rwkv import _np_ln, channel_mix_step
    x = x + causal_attention_cached(_np_ln(x, b.ln1_gain.data, b.ln1_bias.data), cache, b.tmix)
    h, _ = channel_mix_step(_np_ln(x, b.ln2_gain.data, b.ln2_bias.data), None, b.cmix)
    return x + h
