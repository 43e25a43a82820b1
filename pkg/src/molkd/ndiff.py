"""Small reverse-mode autodiff engine over float64 numpy arrays, plus Adam.

Recording happens only inside a ``Tape`` context::

    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = (w * w).sum()
    tape.backward(loss)
    w.grad  # -> array([2., 2., 2.])

Outside a tape every op just computes values, which is how frozen models
(teacher inference, evaluation) run.  A tape can be replayed backward once;
a second ``backward`` raises ``TapeError`` so gradients are never silently
accumulated twice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from molkd.errors import NonFiniteValue, ShapeMismatch, TapeError

_ACTIVE: list["Tape"] = []


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "tape_node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape_node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # arithmetic sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __matmul__(self, o): return matmul(self, o)
    def __neg__(self): return mul(self, -1.0)

    def sum(self, axis=None, keepdims=False): return reduce_sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return reduce_mean(self, axis, keepdims)

    @property
    def T(self): return transpose(self)


def tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Append-only record of differentiable ops.

    Append order is a valid topological order, so backward is one reverse sweep.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward) -> None:
        out.requires_grad = True
        out.tape_node = len(self.nodes)
        self.nodes.append(_Node(out, parents, backward))

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        if self.consumed:
            raise TapeError("tape already replayed; record a new one")
        if loss.tape_node is None or loss.tape_node >= len(self.nodes) or \
                self.nodes[loss.tape_node].out is not loss:
            raise TapeError("loss was not recorded on this tape")
        if seed is None:
            if loss.size != 1:
                raise ShapeMismatch("backward needs a scalar loss or an explicit seed")
            seed = np.ones_like(loss.data)
        self.consumed = True
        # intermediate gradients live here; only leaves get .grad
        grads: dict[int, np.ndarray] = {id(loss): seed}
        produced = {id(n.out) for n in self.nodes}
        for node in reversed(self.nodes[: loss.tape_node + 1]):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) not in produced:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg
        self.nodes = []


def _tape_for(*xs: Tensor) -> Tape | None:
    if not _ACTIVE:
        return None
    return _ACTIVE[-1] if any(x.requires_grad for x in xs) else None


def _make(data, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    tape = _tape_for(*parents)
    if tape is not None:
        tape.record(out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from exc


# --- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    """Elementwise product; a python scalar operand gives scalar-mul."""
    a, b = tensor(a), tensor(b)
    _broadcast_shape(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape(a, b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    # subgradient 0 at exactly 0
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), computed without overflow."""
    d = x.data
    out = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * d))
    return _make(out, (x,), lambda g: (g * sig,))


# --- shape / reductions --------------------------------------------------


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), back)


def row_sum(x: Tensor) -> Tensor:
    return reduce_sum(x, axis=1)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return mul(reduce_sum(x, axis, keepdims), 1.0 / n)


def transpose(x: Tensor) -> Tensor:
    return _make(x.data.T, (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def diagonal(x: Tensor) -> Tensor:
    if x.data.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeMismatch(f"diagonal needs a square matrix, got {x.shape}")
    return _make(np.diagonal(x.data).copy(), (x,), lambda g: (np.diag(g),))


def take_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)

    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), back)


def concat_rows(xs: Sequence[Tensor]) -> Tensor:
    xs = [tensor(x) for x in xs]
    if len({x.shape[1:] for x in xs}) > 1:
        raise ShapeMismatch("concat_rows needs matching trailing shapes")
    bounds = np.cumsum([0] + [x.shape[0] for x in xs])
    out = np.concatenate([x.data for x in xs], axis=0)
    return _make(out, tuple(xs),
                 lambda g: tuple(g[bounds[k]:bounds[k + 1]] for k in range(len(xs))))


# --- linear algebra ------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def spmm(A: sp.spmatrix, x: Tensor) -> Tensor:
    """Constant sparse matrix times a dense tensor; only ``x`` is differentiable."""
    if A.shape[1] != x.shape[0]:
        raise ShapeMismatch(f"spmm {A.shape} @ {x.shape}")
    At = A.T.tocsr()
    return _make(np.asarray(A @ x.data), (x,), lambda g: (np.asarray(At @ g),))


def norm(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; zero vectors get norm 0 and gradient 0."""
    out = np.sqrt((x.data * x.data).sum(axis=axis))

    def back(g):
        n = np.expand_dims(out, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, x.data / safe, 0.0) * np.expand_dims(g, axis),)

    return _make(out, (x,), back)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarity.

    Two vectors give a scalar; two matrices (n x d, m x d) give an n x m
    matrix.  A zero vector has similarity 0 with everything.
    """
    vec = a.data.ndim == 1
    A = a.data.reshape(1, -1) if vec else a.data
    B = b.data.reshape(1, -1) if b.data.ndim == 1 else b.data
    if A.shape[1] != B.shape[1]:
        raise ShapeMismatch(f"cosine_similarity {a.shape} vs {b.shape}")
    na = np.sqrt((A * A).sum(1))
    nb = np.sqrt((B * B).sum(1))
    ia = np.where(na > 0, 1.0 / np.where(na > 0, na, 1.0), 0.0)
    ib = np.where(nb > 0, 1.0 / np.where(nb > 0, nb, 1.0), 0.0)
    Ua, Ub = A * ia[:, None], B * ib[:, None]
    S = Ua @ Ub.T

    def back(g):
        G = np.asarray(g).reshape(S.shape)
        # d cos / dA_i = (Ub_j - S_ij Ua_i) / |A_i|
        gA = (G @ Ub - (G * S).sum(1)[:, None] * Ua) * ia[:, None]
        gB = (G.T @ Ua - (G * S).sum(0)[:, None] * Ub) * ib[:, None]
        return gA.reshape(a.shape), gB.reshape(b.shape)

    out = S[0, 0] if vec and b.data.ndim == 1 else S
    return _make(out, (a, b), back)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    m = np.max(x.data, axis=axis, keepdims=True)
    shifted = np.exp(x.data - m)
    s = shifted.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    soft = shifted / s
    return _make(out, (x,), lambda g: (soft * np.expand_dims(g, axis),))


# --- gradient checking ---------------------------------------------------


@dataclass
class GradCheckResult:
    max_error: float
    skipped: list[int] = field(default_factory=list)
    checked: int = 0

    def __float__(self) -> float:
        return self.max_error


def gradient(f: Callable[[Tensor], Tensor], x: np.ndarray) -> tuple[float, np.ndarray]:
    """Value and analytic gradient of scalar ``f`` at ``x``."""
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        y = f(xt)
    if y.tape_node is None:
        return y.item(), np.zeros_like(xt.data)
    tape.backward(y)
    g = xt.grad if xt.grad is not None else np.zeros_like(xt.data)
    return y.item(), g


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> GradCheckResult:
    """Compare the analytic gradient of ``f`` with central differences.

    Error per coordinate is ``|analytic - fd| / max(1, |fd|)``.  Coordinates
    whose window ``[x - h, x + h]`` straddles a kink are skipped: either the
    one-sided slopes keep disagreeing when the step is halved, or the central
    estimates at ``h`` and ``h/2`` disagree.
    """
    x = np.array(tensor(x).data, dtype=np.float64)
    f0, g = gradient(f, x)

    def value(z):
        v = f(Tensor(z)).item()
        if not math.isfinite(v):
            raise NonFiniteValue(f"f is not finite near the check point ({v})")
        return v

    if not math.isfinite(f0) or not np.all(np.isfinite(g)):
        raise NonFiniteValue("non-finite value or gradient at the check point")
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    worst = 0.0
    skipped = []
    for k in range(flat.size):
        probes = {}
        for step in (h, -h, h / 2, -h / 2):
            z = flat.copy()
            z[k] += step
            probes[step] = value(z.reshape(x.shape))
        c1 = (probes[h] - probes[-h]) / (2 * h)
        c2 = (probes[h / 2] - probes[-h / 2]) / h
        d1 = (probes[h] - f0) / h - (f0 - probes[-h]) / h
        d2 = (probes[h / 2] - f0) / (h / 2) - (f0 - probes[-h / 2]) / (h / 2)
        scale = max(1.0, abs(c1))
        if abs(c1 - c2) > 1e-6 * scale or (abs(d1) > 1e-6 * scale and abs(d2) > 0.75 * abs(d1)):
            skipped.append(k)
            continue
        worst = max(worst, abs(gflat[k] - c1) / scale)
    return GradCheckResult(worst, skipped, flat.size - len(skipped))


# --- optimizer -----------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None],
              state: AdamState) -> tuple[Sequence[np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ShapeMismatch("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} vs parameter {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


class Adam:
    """Adam over a fixed list of leaf tensors; reads ``.grad`` and clears it."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr, beta1, beta2, eps)

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state)
        self.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
