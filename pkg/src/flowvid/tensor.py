"""Minimal N-dimensional tensor with reverse-mode autodiff on an explicit tape.

Forward values live in numpy arrays. Every differentiable operation that runs
while a Tape is active appends a node holding the inputs and an adjoint
closure; `backward` walks the tape in reverse and accumulates gradients into
a map keyed by tensor identity.

Broadcasting is deliberately restricted to leading batch axes (a bias of
shape [d] may be added to [b, n, d], but nothing fancier). Tensors that
participate in a tape must not be mutated in place.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

# GELU tanh-approximation constants (sqrt(2/pi) and the cubic coefficient).
GELU_C0 = 0.7978845608
GELU_C1 = 0.044715


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Append-only record of executed operations for one backward pass.

    A tape is confined to one logical training step. Use as a context
    manager; ops executed inside record their adjoint rules here.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def record(self, out: "Tensor", inputs: tuple["Tensor", ...],
               adjoint: Callable) -> None:
        self.nodes.append((out, inputs, adjoint))


class Tensor:
    """Immutable N-d array of real scalars, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 name: str = ""):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # convenience arithmetic (all routed through the taped ops below)
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _record(out: Tensor, inputs: tuple[Tensor, ...], adjoint: Callable) -> Tensor:
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        if _ACTIVE_TAPE is not None:
            _ACTIVE_TAPE.record(out, inputs, adjoint)
    return out


def _check_finite(arr: np.ndarray, op: str) -> None:
    # Cheap guard only on scalars; full checks live in callers that need them.
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape` (leading-axis rule)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, (g, s) in enumerate(zip(grad.shape, shape)):
        if s == 1 and g != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _leading_broadcastable(a: tuple[int, ...], b: tuple[int, ...]) -> bool:
    """True if the shorter shape equals the trailing axes of the longer one
    (allowing extent-1 axes), i.e. broadcasting over leading axes only."""
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    for s, l in zip(reversed(short), reversed(long_)):
        if s != l and s != 1 and l != 1:
            return False
    return True


# ---------------------------------------------------------------------------
# elementwise / reduction ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if not _leading_broadcastable(a.shape, b.shape):
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} not broadcastable")
    out = Tensor(a.data + b.data)

    def adjoint(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), adjoint)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if not _leading_broadcastable(a.shape, b.shape):
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} not broadcastable")
    out = Tensor(a.data - b.data)

    def adjoint(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, (a, b), adjoint)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if not _leading_broadcastable(a.shape, b.shape):
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} not broadcastable")
    out = Tensor(a.data * b.data)

    def adjoint(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), adjoint)


def scale(a: Tensor, k: float) -> Tensor:
    out = Tensor(a.data * k)

    def adjoint(g):
        return (g * k,)

    return _record(out, (a,), adjoint)


def mean(a: Tensor) -> Tensor:
    out = Tensor(a.data.mean())
    n = a.size

    def adjoint(g):
        return (np.broadcast_to(g / n, a.shape).astype(a.dtype, copy=False),)

    return _record(out, (a,), adjoint)


def tsum(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())

    def adjoint(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)

    return _record(out, (a,), adjoint)


def gelu(a: Tensor) -> Tensor:
    """Elementwise x * Phi(x) via the tanh approximation
    0.5 x (1 + tanh(0.7978845608 (x + 0.044715 x^3)))."""
    x = a.data
    x2 = x * x
    th = np.tanh(GELU_C0 * (x + GELU_C1 * x2 * x))
    out = Tensor(0.5 * x * (1.0 + th))

    def adjoint(g):
        sech2 = 1.0 - th * th
        d = 0.5 * (1.0 + th) + 0.5 * x * sech2 * GELU_C0 * (1.0 + 3.0 * GELU_C1 * x2)
        return (g * d,)

    return _record(out, (a,), adjoint)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    x = a.data
    s = x - x.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    out = Tensor(s)

    def adjoint(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _record(out, (a,), adjoint)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1 (up to eps), then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},), "
                         f"got {gain.shape} and {bias.shape}")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def adjoint(g):
        gg = g * gain.data
        # d/dx of (x - mu) * inv with mu, var functions of x
        term = gg - gg.mean(axis=-1, keepdims=True) \
            - xhat * (gg * xhat).mean(axis=-1, keepdims=True)
        dx = term * inv
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        return dx, dgain.astype(x.dtype, copy=False), dbias.astype(x.dtype, copy=False)

    return _record(out, (x, gain, bias), adjoint)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(a.data.reshape(shape))

    def adjoint(g):
        return (g.reshape(a.shape),)

    return _record(out, (a,), adjoint)


def transpose(a: Tensor, perm: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if perm is None:
        perm = list(range(a.data.ndim))
        perm[-1], perm[-2] = perm[-2], perm[-1]
    perm = tuple(perm)
    inv = tuple(np.argsort(perm))
    out = Tensor(a.data.transpose(perm))

    def adjoint(g):
        return (g.transpose(inv),)

    return _record(out, (a,), adjoint)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def adjoint(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), adjoint)


def tslice(a: Tensor, index) -> Tensor:
    """Basic slicing (no fancy indexing); gradient scatters back."""
    out = Tensor(a.data[index])

    def adjoint(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        full[index] = g
        return (full,)

    return _record(out, (a,), adjoint)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------------------
# matmul and attention


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, "
                         f"got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} vs {b.shape}")
    if not _leading_broadcastable(a.shape[:-2], b.shape[:-2]):
        raise ShapeError(f"matmul: batch extents not broadcastable, "
                         f"{a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data)

    def adjoint(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), adjoint)


def mhsa(x: Tensor, w_qkv: Tensor, b_qkv: Tensor, w_out: Tensor, b_out: Tensor,
         heads: int) -> Tensor:
    """Multi-head self-attention with scaled dot product (scale 1/sqrt(d/heads)).

    x: [..., tokens, d]. w_qkv: [d, 3d], w_out: [d, d]. Composed entirely from
    taped primitives so the adjoint falls out of the tape.
    """
    d = x.shape[-1]
    if d % heads != 0:
        raise ShapeError(f"mhsa: model dim {d} not divisible by {heads} heads")
    n = x.shape[-2]
    lead = x.shape[:-2]
    dh = d // heads

    qkv = add(matmul(x, w_qkv), b_qkv)                      # [..., n, 3d]
    qkv = reshape(qkv, lead + (n, 3, heads, dh))
    nd = len(lead)
    # -> [3, ..., heads, n, dh]
    qkv = transpose(qkv, (nd + 1,) + tuple(range(nd)) + (nd + 2, nd, nd + 3))
    q = tslice(qkv, 0)
    k = tslice(qkv, 1)
    v = tslice(qkv, 2)

    # scale q (small) rather than the n x n attention matrix (large)
    att = softmax(matmul(scale(q, 1.0 / math.sqrt(dh)), transpose(k)))
    o = matmul(att, v)                                          # [..., h, n, dh]
    o = transpose(o, tuple(range(nd)) + (nd + 1, nd, nd + 2))   # [..., n, h, dh]
    o = reshape(o, lead + (n, d))
    return add(matmul(o, w_out), b_out)


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor, tape: Tape,
             leaves: Iterable[Tensor] = ()) -> dict[int, np.ndarray]:
    """Reverse-accumulate gradients of a scalar loss over a tape.

    Returns a map from id(tensor) to gradient array and sets `.grad` on every
    tensor reached. Leaves passed in that the loss never touched receive zero
    gradients of matching shape.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(1.0, dtype=loss.dtype)}
    for out, inputs, adjoint in reversed(tape.nodes):
        g = grads.get(id(out))
        if g is None:
            continue
        for t, gi in zip(inputs, adjoint(g)):
            if not t.requires_grad:
                continue
            gi = np.asarray(gi, dtype=t.dtype)
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for t in leaves:
        if id(t) not in grads:
            grads[id(t)] = np.zeros(t.shape, dtype=t.dtype)
    for out, inputs, _ in tape.nodes:
        for t in inputs:
            if id(t) in grads:
                t.grad = grads[id(t)]
    for t in leaves:
        t.grad = grads[id(t)]
    return grads
