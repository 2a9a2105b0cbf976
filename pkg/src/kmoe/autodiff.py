"""Tape-based reverse-mode differentiation over numpy arrays.

Every op in this module accepts plain arrays or :class:`Node` objects.  When no
argument is a node the op simply returns the numpy result, so network code
runs unchanged for inference.  When any argument is a node the result is
recorded on that node's tape together with a closure that pushes the output
gradient back to the parents.

Top-1 routing masks are treated as constants: no gradient flows through an
argmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import numerics


class Node:
    __slots__ = ("value", "parents", "backward_fn", "op", "grad", "tape", "name", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, op="leaf", tape=None, name=None, requires_grad=True):
        self.value = np.asarray(value)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.grad = None
        self.tape = tape
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self):
        return self.value.ndim

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if g.shape != self.value.shape:
            raise ValueError(f"gradient shape {g.shape} != value shape {self.value.shape} ({self.op})")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape}, name={self.name!r})"

    # operator sugar
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

    def __truediv__(self, other):
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of nodes plus a registry of named parameter leaves."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    def param(self, name: str, value: np.ndarray) -> Node:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already registered")
        node = Node(value, tape=self, name=name, op="param")
        self.nodes.append(node)
        self.params[name] = node
        return node

    def params_from(self, values: Mapping[str, np.ndarray]) -> dict[str, Node]:
        return {k: self.param(k, v) for k, v in values.items()}

    def const(self, value) -> Node:
        node = Node(value, tape=self, op="const", requires_grad=False)
        self.nodes.append(node)
        return node

    def record(self, value, parents, backward_fn, op) -> Node:
        parents = tuple(parents)
        needs = any(p.requires_grad for p in parents)
        node = Node(value, parents, backward_fn if needs else None, op=op, tape=self, requires_grad=needs)
        self.nodes.append(node)
        return node


def backward(tape: Tape, loss: Node) -> dict[str, np.ndarray]:
    """Reverse-accumulate from a scalar ``loss``; return gradients by parameter name."""
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    if loss.tape is not tape:
        raise ValueError("loss was not recorded on this tape")
    for n in tape.nodes:
        n.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        if node.grad is None or node.backward_fn is None:
            continue
        node.backward_fn(node.grad)
    return {
        name: (p.grad if p.grad is not None else np.zeros_like(p.value))
        for name, p in tape.params.items()
    }


# --- plumbing -----------------------------------------------------------------


def value(x):
    if isinstance(x, Node):
        return x.value
    if isinstance(x, (int, float)):
        # python scalars stay weakly typed so float32 graphs stay float32
        return x
    return np.asarray(x)


def _tape_of(args: Iterable) -> Tape | None:
    for a in args:
        if isinstance(a, Node) and a.tape is not None:
            return a.tape
    return None


def _emit(val, args, backward_fn, op):
    tape = _tape_of(args)
    if tape is None:
        return val
    nodes = [a for a in args if isinstance(a, Node)]
    return tape.record(val, nodes, backward_fn, op)


def _push(x, g):
    if isinstance(x, Node):
        x.accumulate(g)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --- elementwise ----------------------------------------------------------------


def add(a, b):
    av, bv = value(a), value(b)
    out = av + bv

    def bw(g):
        if isinstance(a, Node):
            _push(a, _unbroadcast(g, np.shape(av)))
        if isinstance(b, Node):
            _push(b, _unbroadcast(g, np.shape(bv)))

    return _emit(out, (a, b), bw, "add")


def sub(a, b):
    av, bv = value(a), value(b)
    out = av - bv

    def bw(g):
        if isinstance(a, Node):
            _push(a, _unbroadcast(g, np.shape(av)))
        if isinstance(b, Node):
            _push(b, _unbroadcast(-g, np.shape(bv)))

    return _emit(out, (a, b), bw, "sub")


def mul(a, b):
    av, bv = value(a), value(b)
    out = av * bv

    def bw(g):
        if isinstance(a, Node):
            _push(a, _unbroadcast(g * bv, np.shape(av)))
        if isinstance(b, Node):
            _push(b, _unbroadcast(g * av, np.shape(bv)))

    return _emit(out, (a, b), bw, "mul")


def square(a):
    return mul(a, a)


def exp(a):
    av = value(a)
    out = np.exp(av)
    return _emit(out, (a,), lambda g: _push(a, g * out), "exp")


def relu(a):
    av = value(a)
    out = np.maximum(av, 0)
    return _emit(out, (a,), lambda g: _push(a, g * (av > 0)), "relu")


def sigmoid(a):
    av = value(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * av))
    return _emit(out, (a,), lambda g: _push(a, g * out * (1 - out)), "sigmoid")


def softplus(a):
    av = value(a)
    out = np.logaddexp(0, av).astype(av.dtype)
    sig = 0.5 * (1.0 + np.tanh(0.5 * av))
    return _emit(out, (a,), lambda g: _push(a, g * sig), "softplus")


def silu(a):
    av = value(a)
    sig = 0.5 * (1.0 + np.tanh(0.5 * av))
    out = av * sig
    return _emit(out, (a,), lambda g: _push(a, g * (sig * (1 + av * (1 - sig)))), "silu")


def complex_abs(a):
    """Modulus of a real (..., 2) re/im pair; gradient is zero where the modulus is zero."""
    av = value(a)
    out = np.sqrt(av[..., 0] ** 2 + av[..., 1] ** 2)

    def bw(g):
        safe = np.where(out > 0, out, 1)
        scale = np.where(out > 0, g / safe, 0)
        _push(a, av * scale[..., None])

    return _emit(out, (a,), bw, "complex_abs")


# --- reductions and shape ----------------------------------------------------------


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    av = value(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _push(a, np.broadcast_to(g, av.shape))

    return _emit(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    av = value(a)
    if axis is None:
        n = av.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([av.shape[i] for i in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), av.dtype.type(1.0 / n))


def reshape(a, shape):
    av = value(a)
    out = av.reshape(shape)
    return _emit(out, (a,), lambda g: _push(a, g.reshape(av.shape)), "reshape")


def transpose(a, axes):
    av = value(a)
    inv = np.argsort(axes)
    out = np.transpose(av, axes)
    return _emit(out, (a,), lambda g: _push(a, np.transpose(g, inv)), "transpose")


def concat(xs: Sequence, axis=-1):
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def bw(g):
        for x, gi in zip(xs, np.split(g, splits, axis=axis)):
            _push(x, gi)

    return _emit(out, tuple(xs), bw, "concat")


def take_rows(a, idx: np.ndarray):
    """Gather rows of a 2-D ``(P, C)`` array."""
    av = value(a)
    out = av[idx]

    def bw(g):
        full = np.zeros_like(av)
        np.add.at(full, idx, g)
        _push(a, full)

    return _emit(out, (a,), bw, "take_rows")


def scatter_rows(a, idx: np.ndarray, n_rows: int):
    """Place the rows of ``a`` at positions ``idx`` of a zero ``(n_rows, C)`` array."""
    av = value(a)
    out = np.zeros((n_rows,) + av.shape[1:], dtype=av.dtype)
    out[idx] = av
    return _emit(out, (a,), lambda g: _push(a, g[idx]), "scatter_rows")


# --- linear algebra ---------------------------------------------------------------


def matmul(a, w):
    """``a @ w`` contracting the last axis of ``a`` with a 2-D ``w``."""
    av, wv = value(a), value(w)
    out = av @ wv
    numerics.tally("matmul", out.size * wv.shape[0])

    def bw(g):
        if isinstance(a, Node):
            _push(a, g @ wv.T)
        if isinstance(w, Node):
            _push(w, av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1]))

    return _emit(out, (a, w), bw, "matmul")


def linear(a, w, b=None):
    out = matmul(a, w)
    return out if b is None else add(out, b)


def softmax(a, axis=-1):
    av = value(a)
    z = av - av.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _push(a, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _emit(out, (a,), bw, "softmax")


def layer_norm(a, eps=1e-5):
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    av = value(a)
    mu = av.mean(axis=-1, keepdims=True)
    xc = av - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * out).mean(axis=-1, keepdims=True)
        _push(a, inv * (g - gm - out * gxm))

    numerics.tally("layer_norm", 4 * av.size)
    return _emit(out.astype(av.dtype, copy=False), (a,), bw, "layer_norm")


def linear_op(a, fwd: Callable[[np.ndarray], np.ndarray], adj: Callable[[np.ndarray], np.ndarray], op="linear_op"):
    """Wrap a fixed linear map whose adjoint is known."""
    av = value(a)
    out = fwd(av)
    return _emit(out, (a,), lambda g: _push(a, adj(g)), op)


def linear_recurrence(decay, drive, axis=1):
    """``h_t = decay_t * h_{t-1} + drive_t`` along ``axis`` with ``h_{-1} = 0``."""
    dv, bv = value(decay), value(drive)
    d = np.moveaxis(dv, axis, 0)
    b = np.moveaxis(bv, axis, 0)
    n = d.shape[0]
    h = np.empty_like(b)
    state = np.zeros_like(b[0])
    for t in range(n):
        state = d[t] * state + b[t]
        h[t] = state
    numerics.tally("scan", 2 * b.size)
    out = np.moveaxis(h, 0, axis)

    def bw(g):
        gm = np.moveaxis(g, axis, 0)
        gh = np.empty_like(gm)
        acc = np.zeros_like(gm[0])
        for t in range(n - 1, -1, -1):
            acc = gm[t] + (d[t + 1] * acc if t + 1 < n else 0)
            gh[t] = acc
        if isinstance(drive, Node):
            _push(drive, np.moveaxis(gh, 0, axis))
        if isinstance(decay, Node):
            prev = np.concatenate([np.zeros_like(h[:1]), h[:-1]], axis=0)
            _push(decay, np.moveaxis(gh * prev, 0, axis))

    return _emit(out, (decay, drive), bw, "linear_recurrence")


# --- optimisation ---------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls(0, {k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(
    params: dict[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 0.0,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One AdamW update with decoupled weight decay.

    ``p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)`` where
    ``m_hat`` and ``v_hat`` are the bias-corrected moment estimates.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    b1, b2 = betas
    t = state.step + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ValueError(f"shape mismatch for {k!r}: param {p.shape}, grad {g.shape}")
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        upd = (m / c1) / (np.sqrt(v / c2) + eps)
        new_params[k] = (p - lr * (upd + weight_decay * p)).astype(p.dtype, copy=False)
        new_m[k] = m.astype(p.dtype, copy=False)
        new_v[k] = v.astype(p.dtype, copy=False)
    return new_params, AdamState(t, new_m, new_v)


def cosine_lr(step: int, total: int, base_lr: float, warmup: int = 0, min_lr: float = 0.0) -> float:
    """Linear warm-up to ``base_lr`` then cosine annealing to ``min_lr``."""
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(1, total - warmup)
    frac = min(1.0, (step - warmup) / span)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * frac))


# --- finite differences ----------------------------------------------------------


def numerical_grad(f: Callable[[], float], arr: np.ndarray, index, h: float = 1e-5) -> float:
    """Central difference of ``f`` with respect to ``arr[index]`` (mutated in place, then restored)."""
    old = arr[index]
    arr[index] = old + h
    fp = f()
    arr[index] = old - h
    fm = f()
    arr[index] = old
    return (fp - fm) / (2 * h)


def scope(params: Mapping, prefix: str) -> dict:
    """View of the entries under ``prefix.`` with the prefix stripped."""
    head = prefix + "."
    return {k[len(head):]: v for k, v in params.items() if k.startswith(head)}


def flatten(tree: Mapping, prefix: str = "") -> dict:
    """Flatten nested dicts into dotted names."""
    out = {}
    for k, v in tree.items():
        name = f"{prefix}.{k}" if prefix else str(k)
        if isinstance(v, Mapping):
            out.update(flatten(v, name))
        else:
            out[name] = v
    return out
