"""Return-conditioned sequence decision model over (R̂, s, a) token triples.

The token mixer is pluggable: causal attention (``dt``) or one of the RWKV
families (``drwkv4``/``drwkv5``/``drwkv6``). Everything else, embeddings,
residual wiring, feed-forward, action head, is shared.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numeric as nc
from .attention import KVCache, block_step_cached, init_cache
from .numeric import Tensor
from .rwkv import (BlockParams, LN_EPS, RecurrentState, _np_ln, block_parallel, block_step,
                   init_block, init_state, named_tensors)

FAMILIES = {"dt": "attn", "drwkv4": "v4", "drwkv5": "v5", "drwkv6": "v6"}


class ConfigError(ValueError):
    pass


class EmptyBatchError(ValueError):
    pass


@dataclass
class ModelConfig:
    family: str = "drwkv4"
    layers: int = 3
    width: int = 64
    heads: int = 4
    context: int = 20  # timesteps; 3 * context tokens
    state_dim: int = 5
    act_dim: int = 1
    max_horizon: int = 64
    seed: int = 0
    d_ff: int | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; valid: {', '.join(FAMILIES)}")
        if self.context < 1 or self.layers < 1:
            raise ConfigError("context and layers must be >= 1")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")

    @property
    def mixer(self) -> str:
        return FAMILIES[self.family]


@dataclass
class TokenizedBatch:
    rtg: np.ndarray        # (B, K, 1), reward units
    states: np.ndarray     # (B, K, S)
    actions: np.ndarray    # (B, K, A)
    timesteps: np.ndarray  # (B, K) int
    mask: np.ndarray       # (B, K) bool

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


@dataclass
class Normalizer:
    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray
    rtg_scale: float = 1.0

    @classmethod
    def identity(cls, state_dim: int, act_dim: int) -> "Normalizer":
        return cls(np.zeros(state_dim), np.ones(state_dim), np.zeros(act_dim), np.ones(act_dim))

    @classmethod
    def from_meta(cls, meta) -> "Normalizer":
        return cls(np.array(meta.state_mean), np.array(meta.state_std),
                   np.array(meta.action_mean), np.array(meta.action_std),
                   1.0 / max(abs(meta.expert_return), 1.0))


def returns_to_go(rewards) -> np.ndarray:
    r = np.asarray(rewards, dtype=float)
    if r.size == 0:
        raise ValueError("returns_to_go needs at least one reward")
    return np.cumsum(r[::-1])[::-1]


def normalized_score(achieved: float, random_ref: float, expert_ref: float) -> float:
    if expert_ref == random_ref:
        raise ConfigError("expert and random reference returns coincide")
    return 100.0 * (achieved - random_ref) / (expert_ref - random_ref)


class DecisionModel:
    def __init__(self, config: ModelConfig, normalizer: Normalizer | None = None):
        self.config = config
        c = config
        rng = nc.make_rng(c.seed, 1)
        D = c.width
        u = lambda shape, fan: nc.param(rng.uniform(-1, 1, size=shape) / math.sqrt(fan))  # noqa: E731
        self.embed = {
            "rtg_W": u((1, D), 1), "rtg_b": nc.param(np.zeros(D)),
            "state_W": u((c.state_dim, D), c.state_dim), "state_b": nc.param(np.zeros(D)),
            "action_W": u((c.act_dim, D), c.act_dim), "action_b": nc.param(np.zeros(D)),
            "timestep": nc.param(rng.normal(0.0, 0.02, size=(c.max_horizon, D))),
            "ln_gain": nc.param(np.ones(D)), "ln_bias": nc.param(np.zeros(D)),
        }
        self.blocks: list[BlockParams] = [init_block(c.mixer, D, c.heads, rng, c.d_ff)
                                          for _ in range(c.layers)]
        self.head = {
            "ln_gain": nc.param(np.ones(D)), "ln_bias": nc.param(np.zeros(D)),
            "W": u((D, c.act_dim), D), "b": nc.param(np.zeros(c.act_dim)),
        }
        self.normalizer = normalizer or Normalizer.identity(c.state_dim, c.act_dim)

    # ------------------------------------------------------------ parameters

    def named_params(self) -> dict[str, Tensor]:
        out = {f"embed.{k}": v for k, v in self.embed.items()}
        for i, b in enumerate(self.blocks):
            out.update(named_tensors(b, f"blocks.{i}."))
        out.update({f"head.{k}": v for k, v in self.head.items()})
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_params().values())

    def num_params(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def astype(self, dtype) -> "DecisionModel":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    # ------------------------------------------------------------ training form

    def _norm_inputs(self, rtg, states, actions):
        # normalise in float64 before casting: constant dimensions have a 1e-6 std floor,
        # which would magnify float32 input rounding
        nz = self.normalizer
        dt = self.embed["rtg_W"].data.dtype
        return ((rtg * nz.rtg_scale).astype(dt), ((states - nz.state_mean) / nz.state_std).astype(dt),
                ((actions - nz.action_mean) / nz.action_std).astype(dt))

    def embed_and_interleave(self, batch: TokenizedBatch) -> Tensor:
        """(B, 3K, D) token sequence ordered R̂_1, s_1, a_1, R̂_2, ..."""
        c = self.config
        B, K = batch.shape
        if (batch.states.shape[-1] != c.state_dim or batch.actions.shape[-1] != c.act_dim
                or batch.rtg.shape[-1] != 1):
            raise ConfigError("batch dimensions do not match the model config")
        if np.any(batch.timesteps >= c.max_horizon):
            raise ConfigError("timestep exceeds max_horizon")
        e = self.embed
        rtg, st, ac = self._norm_inputs(batch.rtg, batch.states, batch.actions)
        time = nc.take_rows(e["timestep"], batch.timesteps)
        toks = [rtg @ e["rtg_W"] + e["rtg_b"] + time,
                st @ e["state_W"] + e["state_b"] + time,
                ac @ e["action_W"] + e["action_b"] + time]
        seq = nc.reshape(nc.stack(toks, axis=2), (B, 3 * K, c.width))
        return nc.layer_norm(seq, e["ln_gain"], e["ln_bias"], LN_EPS)

    def trunk(self, batch: TokenizedBatch) -> Tensor:
        h = self.embed_and_interleave(batch)
        for b in self.blocks:
            h = block_parallel(h, b)
        return h

    def action_head(self, h: Tensor) -> Tensor:
        hd = self.head
        return nc.layer_norm(h, hd["ln_gain"], hd["ln_bias"], LN_EPS) @ hd["W"] + hd["b"]

    def predict_normalized(self, batch: TokenizedBatch) -> Tensor:
        """Action predictions (B, K, A) from the state-token outputs, normalised units."""
        return self.action_head(self.trunk(batch)[:, 1::3, :])

    def forward_loss(self, batch: TokenizedBatch) -> Tensor:
        m = batch.mask.astype(float)[..., None]
        count = m.sum() * self.config.act_dim
        if count == 0:
            raise EmptyBatchError("every position in the batch is masked")
        target = (batch.actions - self.normalizer.action_mean) / self.normalizer.action_std
        err = self.predict_normalized(batch) - target
        return nc.sum(nc.square(err) * m) * (1.0 / count)

    # ------------------------------------------------------------ inference

    def _embed_np(self, kind: str, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        e = self.embed
        tok = x @ e[f"{kind}_W"].data + e[f"{kind}_b"].data + e["timestep"].data[t]
        return _np_ln(tok, e["ln_gain"].data, e["ln_bias"].data)

    def _head_np(self, h: np.ndarray) -> np.ndarray:
        hd = self.head
        y = _np_ln(h, hd["ln_gain"].data, hd["ln_bias"].data) @ hd["W"].data + hd["b"].data
        return y * self.normalizer.action_std + self.normalizer.action_mean

    def new_inference(self, batch: int, mode: str | None = None) -> "InferenceSession":
        return InferenceSession(self, batch, mode)


class InferenceSession:
    """Incremental action prediction for ``batch`` lockstep rollouts.

    Modes: ``recurrent`` (RWKV families, constant state), ``cache`` (attention,
    growing key/value store) and ``window`` (any family; recomputes the whole
    sequence form over the last K timesteps every step).
    """

    def __init__(self, model: DecisionModel, batch: int, mode: str | None = None):
        c = model.config
        self.model = model
        self.batch = batch
        if mode is None:
            mode = "window" if c.family == "dt" else "recurrent"
        if mode == "recurrent" and c.family == "dt":
            raise ConfigError("attention has no recurrent state; use 'cache' or 'window'")
        if mode == "cache" and c.family != "dt":
            raise ConfigError("'cache' mode is for the attention baseline")
        if mode not in ("recurrent", "cache", "window"):
            raise ConfigError(f"unknown inference mode {mode!r}")
        self.mode = mode
        dtype = model.embed["timestep"].data.dtype
        if mode == "recurrent":
            self.state: RecurrentState | None = init_state(model.blocks, (batch,), dtype)
        elif mode == "cache":
            self.caches: list[KVCache] = [init_cache(b, (batch,), dtype) for b in model.blocks]
        self.history: dict[str, list] = {"rtg": [], "states": [], "actions": [], "timesteps": []}

    def _feed(self, tok: np.ndarray) -> np.ndarray:
        if self.mode == "recurrent":
            layers = self.state.layers
            for i, b in enumerate(self.model.blocks):
                tok, layers[i] = block_step(tok, layers[i], b)
            return tok
        for b, cache in zip(self.model.blocks, self.caches):
            tok = block_step_cached(tok, cache, b)
        return tok

    def act(self, rtg: np.ndarray, state: np.ndarray, timestep: np.ndarray) -> np.ndarray:
        """Action for the current step given its return-to-go and observation.

        ``rtg`` is (B,) or (B, 1), ``state`` (B, S), ``timestep`` (B,).
        """
        m = self.model
        nz = m.normalizer
        # copies: callers commonly update their rtg buffer in place between steps
        rtg = np.array(rtg, dtype=float).reshape(self.batch, 1)
        state = np.array(state, dtype=float).reshape(self.batch, -1)
        timestep = np.array(timestep, dtype=int).reshape(self.batch)
        h = self.history
        if len(h["actions"]) != len(h["states"]):
            raise RuntimeError("record() the previous action before calling act() again")
        h["rtg"].append(rtg)
        h["states"].append(state)
        h["timesteps"].append(timestep)
        if self.mode == "window":
            return self._act_window()
        dtype = m.embed["timestep"].data.dtype
        if len(h["states"]) > 1:
            prev = (h["actions"][-1] - nz.action_mean) / nz.action_std
            self._feed(m._embed_np("action", prev.astype(dtype), h["timesteps"][-2]))
        self._feed(m._embed_np("rtg", (rtg * nz.rtg_scale).astype(dtype), timestep))
        out = self._feed(m._embed_np("state", ((state - nz.state_mean) / nz.state_std).astype(dtype),
                                     timestep))
        return np.clip(m._head_np(out), -1.0, 1.0)

    def _act_window(self) -> np.ndarray:
        m = self.model
        K = m.config.context
        h = self.history
        n = min(K, len(h["states"]))
        acts = h["actions"][-(n - 1):] if n > 1 else []
        acts = acts + [np.zeros((self.batch, m.config.act_dim))]
        batch = TokenizedBatch(
            rtg=np.stack(h["rtg"][-n:], axis=1), states=np.stack(h["states"][-n:], axis=1),
            actions=np.stack(acts, axis=1), timesteps=np.stack(h["timesteps"][-n:], axis=1),
            mask=np.ones((self.batch, n), dtype=bool))
        pred = m.predict_normalized(batch).data[:, -1, :]
        nz = m.normalizer
        return np.clip(pred * nz.action_std + nz.action_mean, -1.0, 1.0)

    def record(self, action: np.ndarray) -> None:
        """Register the action actually taken at the current step."""
        self.history["actions"].append(np.array(action, dtype=float).reshape(self.batch, -1))
        if self.mode != "window":
            # only the newest action is needed by the incremental modes
            for key in ("rtg", "states", "actions", "timesteps"):
                del self.history[key][:-2]

    def persistent_bytes(self) -> int:
        if self.mode == "recurrent":
            return self.state.nbytes
        if self.mode == "cache":
            return int(sum(c.nbytes for c in self.caches))
        return 0


def predict_action(model: DecisionModel, rtg, states, actions, timesteps, mode: str | None = None) -> np.ndarray:
    """Action for the last timestep of a single context.

    ``rtg``/``states``/``timesteps`` cover steps 1..t, ``actions`` covers 1..t-1.
    """
    states = np.asarray(states, dtype=float)
    sess = model.new_inference(1, mode)
    out = None
    for i in range(len(states)):
        out = sess.act(np.asarray(rtg, dtype=float)[i], states[i], np.asarray(timesteps)[i])
        if i < len(states) - 1:
            sess.record(np.asarray(actions, dtype=float)[i])
    return out[0]


# ---------------------------------------------------------------- checkpoints

MAGIC = b"DRWKV1"
CKPT_VERSION = 1


def _norm_arrays(nz: Normalizer) -> dict[str, np.ndarray]:
    return {"norm.state_mean": nz.state_mean, "norm.state_std": nz.state_std,
            "norm.action_mean": nz.action_mean, "norm.action_std": nz.action_std,
            "norm.rtg_scale": np.array([nz.rtg_scale])}


def save_checkpoint(path, model: DecisionModel, step: int = 0, rng_state: dict | None = None,
                    extra: dict | None = None) -> None:
    """Binary container: magic, version, JSON header, name table, f64 LE payload.

    A ``.cfg`` sidecar echoes the configuration as ``key=value`` lines.
    """
    path = Path(path)
    arrays = {k: t.data for k, t in model.named_params().items()}
    arrays.update(_norm_arrays(model.normalizer))
    header = json.dumps({"config": asdict(model.config), "step": int(step),
                         "rng_state": rng_state, "extra": extra or {}}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(header)), header,
             struct.pack("<I", len(arrays))]
    for name, a in arrays.items():
        nb = name.encode()
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<I", a.ndim),
                  struct.pack(f"<{a.ndim}Q", *a.shape)]
    for a in arrays.values():
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    path.write_bytes(b"".join(parts))
    echo = {**asdict(model.config), "step": step, **(extra or {})}
    path.with_suffix(path.suffix + ".cfg").write_text(
        "".join(f"{k}={v}\n" for k, v in echo.items()), encoding="utf-8")


def load_checkpoint(path) -> tuple[DecisionModel, dict]:
    buf = Path(path).read_bytes()
    if buf[:6] != MAGIC:
        raise ConfigError(f"{path}: not a checkpoint (bad magic)")
    off = 6
    (version,) = struct.unpack_from("<I", buf, off)
    if version != CKPT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", buf, off + 4)
    off += 8
    header = json.loads(buf[off:off + hlen])
    off += hlen
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    table = []
    for _ in range(count):
        (nl,) = struct.unpack_from("<I", buf, off)
        name = buf[off + 4:off + 4 + nl].decode()
        off += 4 + nl
        (ndim,) = struct.unpack_from("<I", buf, off)
        shape = struct.unpack_from(f"<{ndim}Q", buf, off + 4)
        off += 4 + 8 * ndim
        table.append((name, shape))
    arrays = {}
    for name, shape in table:
        size = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(float)
        off += 8 * size
    model = DecisionModel(ModelConfig(**header["config"]))
    for name, t in model.named_params().items():
        t.data = arrays[name].copy()
    model.normalizer = Normalizer(arrays["norm.state_mean"], arrays["norm.state_std"],
                                  arrays["norm.action_mean"], arrays["norm.action_std"],
                                  float(arrays["norm.rtg_scale"][0]))
    return model, header
