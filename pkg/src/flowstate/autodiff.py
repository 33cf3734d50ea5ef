"""Reverse-mode automatic differentiation on dense float64 arrays.

A ``Tape`` records every primitive applied to tensors that participate in a
forward pass. ``backward`` replays the records in exact reverse order,
accumulating vector-Jacobian products into per-node gradient buffers. Tensors
without a node id are constants and receive no gradient. A tensor belongs to
at most one tape; mixing tapes is an error.

Numerics policy:
  * everything is float64;
  * ``log`` clamps its argument to ``LOG_FLOOR`` (guards underflow only;
    upstream code must keep arguments structurally positive);
  * ``div`` follows IEEE semantics, so dividing by zero propagates inf/nan
    instead of raising;
  * elementwise ops broadcast numpy-style and gradients of broadcast operands
    are summed back to the operand shape (the intended use is broadcasting a
    vector, or a keepdims reduction, over a batch).
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    """Operand shapes are illegal for a primitive."""


class Tensor:
    """Dense float64 array, optionally tracked on a Tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = "const" if self.node is None else f"node={self.node}"
        return f"Tensor(shape={self.shape}, {tag})"

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis: int | None = None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False):
        return mean_(self, axis=axis, keepdims=keepdims)


def tensor(data) -> Tensor:
    """Wrap data as a constant (untracked) tensor."""
    return Tensor(data)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitives for one forward pass.

    Single-threaded per tape; independent tapes may run concurrently.
    """

    def __init__(self):
        self._records: list[tuple[int, tuple[int | None, ...], Callable]] = []
        self._leaves: dict[int, tuple[int, ...]] = {}
        self._bound: dict[int, tuple[object, Tensor]] = {}
        self._n_nodes = 0

    def _new_node(self) -> int:
        n = self._n_nodes
        self._n_nodes += 1
        return n

    def leaf(self, data) -> Tensor:
        """Register a differentiable leaf (a parameter view) on this tape."""
        t = Tensor(data, self, self._new_node())
        self._leaves[t.node] = t.data.shape
        return t

    def watch(self, param) -> Tensor:
        """Bind a Parameter-like object (has .data) as a leaf, memoized per tape."""
        key = id(param)
        hit = self._bound.get(key)
        if hit is not None:
            return hit[1]
        t = self.leaf(param.data)
        self._bound[key] = (param, t)
        return t

    def record(self, out_data: np.ndarray, inputs: Iterable[Tensor], vjp: Callable) -> Tensor:
        out = Tensor(out_data, self, self._new_node())
        self._records.append((out.node, tuple(t.node for t in inputs), vjp))
        return out

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradients of a scalar loss for every leaf on this tape.

        Leaves that do not influence the loss get zero gradients. Forward
        values are never mutated; rerunning backward is legal.
        """
        if loss.tape is not self:
            raise ValueError("loss tensor does not belong to this tape")
        if loss.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
        for out_node, in_nodes, vjp in reversed(self._records):
            g = grads.pop(out_node, None)
            if g is None:
                continue
            for node, gi in zip(in_nodes, vjp(g)):
                if node is None or gi is None:
                    continue
                buf = grads.get(node)
                grads[node] = gi if buf is None else buf + gi
        out: dict[int, np.ndarray] = {}
        for node, shape in self._leaves.items():
            g = grads.get(node)
            out[node] = np.zeros(shape) if g is None else g
        return out

    def parameter_grads(self, grads: dict[int, np.ndarray]) -> dict:
        """Map a node-keyed gradient dict back to the bound parameter objects."""
        return {param: grads[t.node] for param, t in self._bound.values()}


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    return tape.backward(loss)


# -- recording helper ----------------------------------------------------


def _result(inputs: tuple[Tensor, ...], out_data: np.ndarray, make_vjp: Callable) -> Tensor:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("operands belong to different tapes")
    if tape is None:
        return Tensor(out_data)
    return tape.record(out_data, inputs, make_vjp())


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise primitives ----------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "add")
    out = a.data + b.data
    ash, bsh = a.shape, b.shape

    def make():
        return lambda g: (_sum_to(g, ash), _sum_to(g, bsh))

    return _result((a, b), out, make)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "sub")
    out = a.data - b.data
    ash, bsh = a.shape, b.shape

    def make():
        return lambda g: (_sum_to(g, ash), _sum_to(-g, bsh))

    return _result((a, b), out, make)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "mul")
    out = a.data * b.data
    ad, bd = a.data, b.data
    ash, bsh = a.shape, b.shape

    def make():
        return lambda g: (_sum_to(g * bd, ash), _sum_to(g * ad, bsh))

    return _result((a, b), out, make)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    ad, bd = a.data, b.data
    ash, bsh = a.shape, b.shape

    def make():
        def vjp(g):
            with np.errstate(divide="ignore", invalid="ignore"):
                ga = g / bd
                gb = -g * ad / (bd * bd)
            return _sum_to(ga, ash), _sum_to(gb, bsh)

        return vjp

    return _result((a, b), out, make)


def neg(a: Tensor) -> Tensor:
    def make():
        return lambda g: (-g,)

    return _result((a,), -a.data, make)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def make():
        return lambda g: (g * (1.0 - y * y),)

    return _result((a,), y, make)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)

    def make():
        return lambda g: (g * y * (1.0 - y),)

    return _result((a,), y, make)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def make():
        return lambda g: (g * y,)

    return _result((a,), y, make)


def log(a: Tensor) -> Tensor:
    xs = np.maximum(a.data, LOG_FLOOR)
    y = np.log(xs)

    def make():
        return lambda g: (g / xs,)

    return _result((a,), y, make)


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)

    def make():
        def vjp(g):
            with np.errstate(divide="ignore", invalid="ignore"):
                return (g / (2.0 * y),)

        return vjp

    return _result((a,), y, make)


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Hard clamp; gradient passes where lo <= x <= hi and is zero outside."""
    y = np.clip(a.data, lo, hi)
    ok = np.ones(a.shape, dtype=bool)
    if lo is not None:
        ok &= a.data >= lo
    if hi is not None:
        ok &= a.data <= hi

    def make():
        return lambda g: (np.where(ok, g, 0.0),)

    return _result((a,), y, make)


def relu(a: Tensor) -> Tensor:
    y = np.maximum(a.data, 0.0)
    pos = a.data > 0.0

    def make():
        return lambda g: (np.where(pos, g, 0.0),)

    return _result((a,), y, make)


# -- structural primitives ------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires ndim >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data
    ash, bsh = a.shape, b.shape

    def make():
        def vjp(g):
            ga = _sum_to(np.matmul(g, np.swapaxes(bd, -1, -2)), ash)
            # stacked data against a plain 2-d weight collapses to one big
            # matmul instead of a per-batch product plus reduction
            if len(ash) > 2 and len(bsh) == 2:
                gb = np.matmul(ad.reshape(-1, ash[-1]).T, g.reshape(-1, g.shape[-1]))
            else:
                gb = _sum_to(np.matmul(np.swapaxes(ad, -1, -2), g), bsh)
            return ga, gb

        return vjp

    return _result((a, b), out, make)


def transpose_last2(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ShapeError(f"transpose_last2 requires ndim >= 2, got {a.shape}")
    out = np.swapaxes(a.data, -1, -2).copy()

    def make():
        return lambda g: (np.swapaxes(g, -1, -2),)

    return _result((a,), out, make)


def sum_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    ash = a.shape

    def make():
        def vjp(g):
            gx = np.asarray(g)
            if axis is not None and not keepdims:
                gx = np.expand_dims(gx, axis)
            return (np.broadcast_to(gx, ash),)

        return vjp

    return _result((a,), np.asarray(out), make)


def mean_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    ash = a.shape

    def make():
        def vjp(g):
            gx = np.asarray(g) / count
            if axis is not None and not keepdims:
                gx = np.expand_dims(gx, axis)
            return (np.broadcast_to(gx, ash),)

        return vjp

    return _result((a,), np.asarray(out), make)


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    parts = [_lift(p) for p in parts]
    if not parts:
        raise ShapeError("concat of an empty list")
    out = np.concatenate([p.data for p in parts], axis=axis)
    extents = [p.shape[axis] for p in parts]

    def make():
        def vjp(g):
            splits = np.cumsum(extents[:-1])
            return tuple(np.split(g, splits, axis=axis))

        return vjp

    return _result(tuple(parts), out, make)


def getitem(a: Tensor, key) -> Tensor:
    out = np.asarray(a.data[key])
    ash = a.shape

    def make():
        def vjp(g):
            gx = np.zeros(ash)
            gx[key] = g
            return (gx,)

        return vjp

    return _result((a,), out, make)


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}") from None
    ash = a.shape

    def make():
        return lambda g: (_sum_to(g, ash),)

    return _result((a,), out, make)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, numerically stabilised by max subtraction."""
    x = a.data
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def make():
        def vjp(g):
            dot = np.sum(g * y, axis=-1, keepdims=True)
            return (y * (g - dot),)

        return vjp

    return _result((a,), y, make)


def solve_rows(w: Tensor, x: Tensor) -> Tensor:
    """Row-vector linear solve: returns z with z @ w.T == x.

    ``w`` is a square (d, d) matrix, ``x`` a batch of row vectors (n, d).
    Exists for invertible linear flow layers, whose density pass needs the
    inverse map to stay differentiable in the matrix entries.
    """
    w, x = _lift(w), _lift(x)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ShapeError(f"solve_rows needs a square matrix, got {w.shape}")
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"solve_rows: shapes {w.shape} and {x.shape} are not aligned")
    z = np.linalg.solve(w.data, x.data.T).T
    wd = w.data

    def make():
        def vjp(g):
            gx = np.linalg.solve(wd.T, g.T).T
            gw = -gx.T @ z
            return gw, gx

        return vjp

    return _result((w, x), z, make)


# -- uniform dispatch over primitive tags ---------------------------------

PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "sum": sum_,
    "mean": mean_,
    "concat": lambda *parts, axis=-1: concat(list(parts), axis=axis),
    "slice": lambda a, key: getitem(a, key),
    "broadcast": lambda a, shape: broadcast_to(a, shape),
    "softmax": softmax,
    "mask_mul": mul,
    "clamp": clamp,
    "relu": relu,
    "transpose_last2": transpose_last2,
    "solve_rows": solve_rows,
}


def forward(tape: Tape | None, kind: str, inputs: list, **kwargs) -> Tensor:
    """Apply a primitive by tag.

    Tensor inputs must be constants or already bound to ``tape``; raw arrays
    are lifted to constants. The result is recorded on ``tape`` whenever any
    input is tracked.
    """
    fn = PRIMITIVES.get(kind)
    if fn is None:
        raise KeyError(f"unknown primitive {kind!r}; known: {sorted(PRIMITIVES)}")
    lifted = [_lift(x) for x in inputs]
    for t in lifted:
        if t.tape is not None and tape is not None and t.tape is not tape:
            raise ValueError("input tensor bound to a different tape")
    return fn(*lifted, **kwargs)


# -- Adam ------------------------------------------------------------------


class AdamState:
    """Adam with bias correction. Defaults: lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, params: list, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {id(p): np.zeros_like(p.data) for p in self.params}
        self.v = {id(p): np.zeros_like(p.data) for p in self.params}

    def step(self, grads: dict) -> None:
        """One update over all tracked parameters; grads keyed by parameter object."""
        for p in self.params:
            if p not in grads:
                raise KeyError(f"missing gradient for parameter {getattr(p, 'name', p)!r}")
            if grads[p].shape != p.data.shape:
                raise ShapeError(
                    f"gradient shape {grads[p].shape} does not match parameter shape {p.data.shape}")
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p in self.params:
            g = grads[p]
            m = self.m[id(p)]
            v = self.v[id(p)]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def adam_step(params: list, grads: dict, state: AdamState) -> None:
    """Functional alias for AdamState.step over the given parameter list."""
    if list(params) != state.params:
        raise ValueError("parameter list does not match the optimizer state")
    state.step(grads)
