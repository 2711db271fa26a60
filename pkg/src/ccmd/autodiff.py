"""Dense reverse-mode automatic differentiation on numpy arrays.

A :class:`Tape` records every op whose inputs include a tracked node.  Values
are float64 throughout.  Tensors built with :func:`const` carry no node and are
never differentiated, so a forward pass over constants is plain numpy.

Broadcasting is limited to a trailing-suffix operand (a bias ``[d]`` over
``[..., d]``, or ``[T, d]`` over ``[B, T, d]``).  Anything else must be made
explicit by the caller.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "node", "tape")

    def __init__(self, value, node: int | None = None, tape: Tape | None = None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.node = node
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def tracked(self) -> bool:
        return self.node is not None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node={self.node})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(self, _lift(other, self))

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return const(np.broadcast_to(np.asarray(x, dtype=DTYPE), like.shape))


def const(value) -> Tensor:
    """Untracked tensor: no gradient ever flows into it."""
    return Tensor(value)


def detach(x: Tensor) -> Tensor:
    return Tensor(x.value)


class _Op:
    __slots__ = ("kind", "inputs", "vjp", "shape")

    def __init__(self, kind, inputs, vjp, shape):
        self.kind = kind
        self.inputs = inputs
        self.vjp = vjp
        self.shape = shape


class Tape:
    """Define-by-run record of ops.

    Node ids are indices into ``ops``; inputs always have smaller ids, so the
    list order is a topological order.
    """

    def __init__(self):
        self.ops: list[_Op] = []
        self.grads: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self.ops)

    def leaf(self, value) -> Tensor:
        value = np.array(value, dtype=DTYPE)
        self.ops.append(_Op("leaf", (), None, value.shape))
        return Tensor(value, len(self.ops) - 1, self)

    def params(self, arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
        return {k: self.leaf(v) for k, v in arrays.items()}

    def record(self, kind, inputs, value, vjp) -> Tensor:
        self.ops.append(_Op(kind, tuple(t.node for t in inputs), vjp, value.shape))
        return Tensor(value, len(self.ops) - 1, self)

    def backward(self, root: Tensor) -> dict[int, np.ndarray]:
        if root.tape is not self or root.node is None:
            raise ValueError("root is not recorded on this tape")
        if root.value.size != 1:
            raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {root.node: np.ones(root.shape, dtype=DTYPE)}
        for nid in range(root.node, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            op = self.ops[nid]
            if op.vjp is None:
                continue
            for src, gin in zip(op.inputs, op.vjp(g)):
                if src is None or gin is None:
                    continue
                if src in grads:
                    grads[src] = grads[src] + gin
                else:
                    grads[src] = gin
        self.grads = grads
        return grads

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the last backward root w.r.t. ``t`` (zeros if unreachable)."""
        if t.node is None:
            raise ValueError("constant tensor has no gradient")
        g = self.grads.get(t.node)
        return np.zeros(t.shape, dtype=DTYPE) if g is None else g


def _tape_of(*ts: Tensor) -> Tape | None:
    tape = None
    for t in ts:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("tensors belong to different tapes")
            tape = t.tape
    return tape


def _emit(kind: str, inputs: Sequence[Tensor], value: np.ndarray, vjp: Callable) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None or not any(t.tracked for t in inputs):
        return Tensor(value)
    return tape.record(kind, inputs, value, vjp)


def _check_suffix(op: str, a: Tensor, b: Tensor):
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix("add", a, b)
    sb = b.shape
    return _emit("add", (a, b), a.value + b.value,
                 lambda g: (g, _reduce_to(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix("sub", a, b)
    sb = b.shape
    return _emit("sub", (a, b), a.value - b.value,
                 lambda g: (g, -_reduce_to(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix("mul", a, b)
    av, bv, sb = a.value, b.value, b.shape
    return _emit("mul", (a, b), av * bv,
                 lambda g: (g * bv, _reduce_to(g * av, sb)))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", (a,), a.value * c, lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    on = a.value > 0
    return _emit("relu", (a,), np.where(on, a.value, 0.0), lambda g: (g * on,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-form GELU."""
    x = a.value
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dudx = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dudx),)

    return _emit("gelu", (a,), out, vjp)


def abs_(a: Tensor) -> Tensor:
    # subgradient 0 at exactly zero
    s = np.sign(a.value)
    return _emit("abs", (a,), np.abs(a.value), lambda g: (g * s,))


# ------------------------------------------------------------------ reductions

def sum_axis(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", (a,), np.asarray(out), vjp)


def mean_axis(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.value.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_axis(a, axis, keepdims), 1.0 / n)


# --------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``[..., m, k] @ [k, n]`` or batched ``[..., m, k] @ [..., k, n]``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (
            b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    shared = b.ndim == 2

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        if shared:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return _emit("matmul", (a, b), av @ bv, vjp)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _emit("reshape", (a,), a.value.reshape(shape), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _emit("transpose", (a,), np.transpose(a.value, axes),
                 lambda g: (np.transpose(g, inv),))


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _emit("concat", ts, np.concatenate([t.value for t in ts], axis=ax),
                 lambda g: tuple(np.split(g, sizes, axis=ax)))


def slice_(a: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing, e.g. ``slice_(x, (slice(None), 0))``."""
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape, dtype=DTYPE)
        out[index] = g
        return (out,)

    return _emit("slice", (a,), np.array(a.value[index]), vjp)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding_lookup: ids outside [0, {table.shape[0]})")
    shape = table.shape

    def vjp(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _emit("embedding", (table,), table.value[ids], vjp)


# ------------------------------------------------------------ normalizations

def softmax_row(a: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` is a boolean array broadcastable to ``a``; False entries get
    probability exactly 0.  Rows with no True entry are all-zero.
    """
    x = a.value
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = e.sum(axis=-1, keepdims=True)
    y = e / np.where(s > 0, s, 1.0)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (a,), y, vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: incompatible shapes {x.shape} and {gain.shape}")
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gv = gain.value

    def vjp(g):
        gx = g * gv
        dx = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                     - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(xv.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layer_norm", (x, gain, bias), xhat * gv + bias.value, vjp)


# --------------------------------------------------------------- grad checking

class GradCheckError(ArithmeticError):
    pass


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error per element is ``|a - c| / max(|a|, |c|, 1e-8)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = np.array(x.value if isinstance(x, Tensor) else x, dtype=DTYPE)
    tape = Tape()
    xt = tape.leaf(x0)
    out = f(xt)
    tape.backward(out)
    analytic = tape.grad(xt)

    def at(v):
        return float(f(const(v)).value)

    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xp[i] += h
        xm = flat.copy()
        xm[i] -= h
        nflat[i] = (at(xp.reshape(x0.shape)) - at(xm.reshape(x0.shape))) / (2 * h)
    for name, arr in (("analytic", analytic), ("numeric", numeric)):
        bad = np.argwhere(~np.isfinite(arr))
        if len(bad):
            raise GradCheckError(f"{name} gradient not finite at index {tuple(int(i) for i in bad[0])}")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0
