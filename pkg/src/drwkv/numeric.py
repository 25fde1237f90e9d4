"""Small dense-array layer with tape-based reverse-mode differentiation.

Arrays are numpy ndarrays wrapped in :class:`Tensor`. While a :class:`Tape` is
active, every primitive whose inputs include a parameter (``requires_grad``) or
an output already recorded on that tape is appended to the tape together with
its vector-Jacobian product. Forward values are computed by the same numpy
expressions with or without a tape, so taped and untaped passes agree bitwise.

The two WKV scans are single primitives with hand-written reverse scans; they
are what makes training a recurrent token mixer affordable without a framework.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from . import _kernels

__all__ = [
    "Tensor", "Tape", "Gradients", "TapeError", "NumericError", "DimensionError",
    "tensor", "param", "matmul", "add", "mul", "sub", "neg", "sum", "mean",
    "exp", "tanh", "sigmoid", "silu", "relu", "square", "layer_norm",
    "reshape", "swapaxes", "getitem", "stack", "token_shift", "take_rows",
    "masked_softmax", "wkv4", "wkv_matrix", "backward", "finite_diff_check",
    "make_rng",
]


class TapeError(RuntimeError):
    """Misuse of the tape (e.g. differentiating a value that was not recorded)."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "_tape", "name")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to the reflected method

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self._tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def param(x, name: str | None = None) -> Tensor:
    return Tensor(np.array(x), requires_grad=True, name=name)


class Tape:
    """Ordered record of primitive applications for one forward pass.

    A tape is single-owner; use one per forward/backward pair.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def _tracked(t, tape: Tape) -> bool:
    return isinstance(t, Tensor) and (t.requires_grad or t._tape is tape)


def _record(out: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    res = Tensor(out)
    if _ACTIVE:
        tape = _ACTIVE[-1]
        if any(_tracked(t, tape) for t in inputs):
            res._tape = tape
            tape.nodes.append((res, inputs, vjp))
    return res


def _d(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    ad, bd = _d(a), _d(b)
    return _record(ad + bd, (a, b),
                   lambda g: (_unbroadcast(g, ad.shape), _unbroadcast(g, bd.shape)))


def sub(a, b) -> Tensor:
    ad, bd = _d(a), _d(b)
    return _record(ad - bd, (a, b),
                   lambda g: (_unbroadcast(g, ad.shape), -_unbroadcast(g, bd.shape)))


def mul(a, b) -> Tensor:
    ad, bd = _d(a), _d(b)
    return _record(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a) -> Tensor:
    return _record(-_d(a), (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    out = np.exp(_d(a))
    return _record(out, (a,), lambda g: (g * out,))


def tanh(a) -> Tensor:
    out = np.tanh(_d(a))
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    out = expit(_d(a))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a) -> Tensor:
    x = _d(a)
    s = expit(x)
    return _record(x * s, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),))


def relu(a) -> Tensor:
    x = _d(a)
    return _record(np.maximum(x, 0.0), (a,), lambda g: (g * (x > 0),))


def square(a) -> Tensor:
    x = _d(a)
    return _record(x * x, (a,), lambda g: (2.0 * g * x,))


# ---------------------------------------------------------------- reductions

def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = _d(a)
    out = np.sum(x, axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(np.asarray(out), (a,), vjp)


def mean(a, axis=None) -> Tensor:
    x = _d(a)
    n = x.size if axis is None else x.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    ad, bd = _d(a), _d(b)
    if ad.ndim < 1 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")
    out = ad @ bd

    if bd.ndim == 2:
        # x @ W: fold leading dims of x into one GEMM for the weight gradient
        def vjp(g):
            if ad.ndim == 1:
                return g @ bd.T, np.outer(ad, g)
            return g @ bd.T, ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    else:
        def vjp(g):
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.swapaxes(ad, -1, -2) @ g
            return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record(out, (a, b), vjp)


def layer_norm(x, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Standardise over the last axis, then scale and shift."""
    xd = _d(x)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = None if gain is None else _d(gain)
    out = xhat if gd is None else xhat * gd
    if bias is not None:
        out = out + _d(bias)

    def vjp(g):
        dxhat = g if gd is None else g * gd
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        dg = None if gd is None else (g * xhat).sum(axis=lead)
        db = None if bias is None else g.sum(axis=lead)
        return dx, dg, db

    return _record(out, (x, gain, bias), vjp)


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    x = _d(a)
    return _record(x.reshape(shape), (a,), lambda g: (g.reshape(x.shape),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    return _record(np.swapaxes(_d(a), ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def getitem(a, idx) -> Tensor:
    x = _d(a)

    def vjp(g):
        gx = np.zeros_like(x)
        gx[idx] = g
        return (gx,)

    return _record(x[idx], (a,), vjp)


def stack(items: Sequence, axis: int = 0) -> Tensor:
    datas = [_d(t) for t in items]
    out = np.stack(datas, axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(datas)))

    return _record(out, tuple(items), vjp)


def token_shift(a) -> Tensor:
    """Previous-token view along axis -2; the first position sees zeros."""
    x = _d(a)
    out = np.zeros_like(x)
    out[..., 1:, :] = x[..., :-1, :]

    def vjp(g):
        gx = np.zeros_like(g)
        gx[..., :-1, :] = g[..., 1:, :]
        return (gx,)

    return _record(out, (a,), vjp)


def take_rows(table, idx: np.ndarray) -> Tensor:
    tb = _d(table)

    def vjp(g):
        gt = np.zeros_like(tb)
        np.add.at(gt, idx, g)
        return (gt,)

    return _record(tb[idx], (table,), vjp)


def masked_softmax(a, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis with ``mask == False`` entries excluded."""
    x = np.where(mask, _d(a), -np.inf)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    p = e / e.sum(axis=-1, keepdims=True)
    return _record(p, (a,), lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),))


# ---------------------------------------------------------------- WKV scans

def _fold(x, dtype, tail: int) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=dtype)
    return x.reshape((-1,) + x.shape[-tail:])


def wkv4(k, v, w, u) -> Tensor:
    """Decayed key-value ratio over axis -2 for inputs of shape (..., T, D).

    ``w`` is the positive per-channel decay, ``u`` the current-token bonus.
    The forward scan keeps the running exponent ``p`` so that large keys do not
    overflow; the reverse scan rescales by the per-sequence key maximum.
    """
    kd, vd, wd, ud = _d(k), _d(v), _d(w), _d(u)
    dtype = np.result_type(kd, vd, wd, ud)
    shape = np.broadcast_shapes(kd.shape, vd.shape)
    kf = _fold(np.broadcast_to(kd, shape), dtype, 2)
    vf = _fold(np.broadcast_to(vd, shape), dtype, 2)
    wf = np.ascontiguousarray(np.broadcast_to(wd, shape[-1:]), dtype=dtype)
    uf = np.ascontiguousarray(np.broadcast_to(ud, shape[-1:]), dtype=dtype)
    out = _kernels.wkv4_forward(kf, vf, wf, uf)

    def vjp(g):
        dk, dv, dw, du = _kernels.wkv4_backward(kf, vf, wf, uf, out, _fold(g, dtype, 2))
        return (_unbroadcast(dk.reshape(shape), kd.shape), _unbroadcast(dv.reshape(shape), vd.shape),
                _unbroadcast(dw.sum(axis=0), wd.shape), _unbroadcast(du.sum(axis=0), ud.shape))

    return _record(out.reshape(shape), (k, v, w, u), vjp)


def wkv_matrix(r, k, v, w, u) -> Tensor:
    """Matrix-state WKV for inputs of shape (..., T, H, n).

    Per head: ``y_t = r_t (diag(u) k_t^T v_t + S_{t-1})`` and
    ``S_t = diag(w_t) S_{t-1} + k_t^T v_t``. ``w`` is either per-step
    (same shape as ``k``) or a per-channel (H, n) decay.
    """
    rd, kd, vd, wd, ud = _d(r), _d(k), _d(v), _d(w), _d(u)
    dtype = np.result_type(rd, kd, vd, wd, ud)
    shape = kd.shape
    rf, kf, vf = (_fold(x, dtype, 3) for x in (rd, kd, vd))
    wf = _fold(np.broadcast_to(wd, shape), dtype, 3)
    uf = np.ascontiguousarray(ud, dtype=dtype)
    out = _kernels.matrix_forward(rf, kf, vf, wf, uf)

    def vjp(g):
        dr, dk, dv, dw, du = _kernels.matrix_backward(rf, kf, vf, wf, uf, _fold(g, dtype, 3))
        return (dr.reshape(shape), dk.reshape(shape), dv.reshape(shape),
                _unbroadcast(dw.reshape(shape), wd.shape), _unbroadcast(du.sum(axis=0), ud.shape))

    return _record(out.reshape(shape), (r, k, v, w, u), vjp)


# ---------------------------------------------------------------- reverse pass

class Gradients(dict):
    """Mapping from leaf :class:`Tensor` to its gradient array."""

    def of(self, t: Tensor) -> np.ndarray:
        g = self.get(t)
        return np.zeros_like(t.data) if g is None else g


def backward(tape: Tape, loss: Tensor) -> Gradients:
    if not isinstance(loss, Tensor) or loss._tape is not tape:
        raise TapeError("loss was not recorded on this tape")
    if loss.data.size != 1:
        raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for out, inputs, vjp in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, vjp(g)):
            if gi is None or not _tracked(inp, tape):
                continue
            key = id(inp)
            if inp.requires_grad:
                leaves[key] = inp
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    return Gradients((t, grads[k]) for k, t in leaves.items())


def finite_diff_check(f: Callable[[Sequence[Tensor]], Tensor], x: Tensor | Sequence[Tensor],
                      h: float = 1e-5, coords: int | None = None,
                      rng: np.random.Generator | None = None) -> float:
    """Max relative error between taped gradients and central differences.

    ``f`` receives ``x`` and must return a scalar :class:`Tensor`. With
    ``coords`` set, that many coordinates per tensor are checked at random.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
    with Tape() as tape:
        loss = f(x)
    grads = backward(tape, loss)
    rng = rng or make_rng(0)
    worst = 0.0
    for t in xs:
        analytic = grads.of(t).reshape(-1)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if coords is not None and coords < flat.size:
            idx = rng.choice(flat.size, size=coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite objective while perturbing coordinate {i}")
            num = (fp - fm) / (2.0 * h)
            err = abs(analytic[i] - num) / (abs(analytic[i]) + abs(num) + 1e-12)
            worst = max(worst, err)
    return worst


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based Philox stream; ``keys`` split independent sub-streams."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *keys])))


def parameters(tree) -> Iterable[Tensor]:
    if isinstance(tree, Tensor):
        yield tree
    elif isinstance(tree, dict):
        for v in tree.values():
            yield from parameters(v)
    elif isinstance(tree, (list, tuple)):
        for v in tree:
            yield from parameters(v)
