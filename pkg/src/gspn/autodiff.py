"""Small reverse-mode automatic differentiation over dense numpy arrays.

Only the primitives the model needs are provided. Every ``Value`` records its
parents and a closure that pushes the output gradient back to them;
``Value.backward`` runs those closures once each in reverse topological order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

SIGMA_FLOOR = 1e-4
_LOG_2PI = math.log(2.0 * math.pi)

CONSTRAINTS = ("none", "softmax-rows", "softplus-positive", "softmax-vector")


class Value:
    __slots__ = ("data", "grad", "parents", "_backward", "op")

    def __init__(self, data, parents: tuple = (), backward: Optional[Callable] = None, op: str = ""):
        data = np.asarray(data)
        # extended precision passes through untouched (finite-difference oracle)
        self.data = data if data.dtype == np.longdouble else data.astype(np.float64, copy=False)
        self.grad = None
        self.parents = parents
        self._backward = backward
        self.op = op

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)

    def __repr__(self):
        return f"Value(op={self.op or 'leaf'}, shape={self.shape})"

    def backward(self, seed=None):
        """Accumulate d(self)/d(node) into ``node.grad`` for every ancestor."""
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in node.parents if id(p) not in seen)
        for node in order:
            node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data) if seed is None else np.asarray(seed, dtype=np.float64)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __getitem__(self, idx): return index(self, idx)

    @property
    def T(self):
        return transpose(self)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _accum(node: Value, g):
    node.grad += _unbroadcast(g, node.data.shape)


def _check_broadcast(a: Value, b: Value, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# --------------------------------------------------------------------------- elementwise

def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        _accum(a, g)
        _accum(b, g)
    return Value(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        _accum(a, g)
        _accum(b, -g)
    return Value(a.data - b.data, (a, b), bw, "sub")


def neg(a) -> Value:
    a = as_value(a)

    def bw(g):
        a.grad += -g
    return Value(-a.data, (a,), bw, "neg")


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)
    return Value(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def bw(g):
        _accum(a, g / b.data)
        _accum(b, -g * out / b.data)
    return Value(out, (a, b), bw, "div")


def log(a) -> Value:
    a = as_value(a)

    def bw(g):
        a.grad += g / a.data
    with np.errstate(divide="ignore"):
        return Value(np.log(a.data), (a,), bw, "log")


def exp(a) -> Value:
    a = as_value(a)
    out = np.exp(a.data)

    def bw(g):
        a.grad += g * out
    return Value(out, (a,), bw, "exp")


def sqrt(a) -> Value:
    a = as_value(a)
    out = np.sqrt(a.data)

    def bw(g):
        a.grad += g * 0.5 / out
    return Value(out, (a,), bw, "sqrt")


def square(a) -> Value:
    a = as_value(a)

    def bw(g):
        a.grad += 2.0 * g * a.data
    return Value(a.data * a.data, (a,), bw, "square")


def softplus(a) -> Value:
    a = as_value(a)
    out = np.logaddexp(0.0, a.data)

    def bw(g):
        a.grad += g / (1.0 + np.exp(-a.data))
    return Value(out, (a,), bw, "softplus")


# --------------------------------------------------------------------------- reductions

def sum(a, axis=None, keepdims: bool = False) -> Value:  # noqa: A001
    a = as_value(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.grad += np.broadcast_to(g, a.shape)
    return Value(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Value:
    a = as_value(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(sum(a, axis, keepdims), 1.0 / n)


def logsumexp(a, axis=-1, keepdims: bool = False) -> Value:
    """log(sum(exp(a))) along ``axis`` with a max shift; -inf rows stay -inf."""
    a = as_value(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        lse = np.log(np.sum(np.exp(a.data - m), axis=axis, keepdims=True)) + m
    out = lse if keepdims else np.squeeze(lse, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        with np.errstate(invalid="ignore"):
            w = np.exp(a.data - lse)
        a.grad += g * np.nan_to_num(w)
    return Value(out, (a,), bw, "logsumexp")


def log_softmax(a, axis=-1) -> Value:
    a = as_value(a)
    return sub(a, logsumexp(a, axis=axis, keepdims=True))


def softmax(a, axis=-1) -> Value:
    a = as_value(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        a.grad += out * (g - (g * out).sum(axis=axis, keepdims=True))
    return Value(out, (a,), bw, "softmax")


# --------------------------------------------------------------------------- linear algebra & indexing

def matmul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    if a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")

    if a.ndim > 2 or b.ndim > 2:
        raise ValueError("matmul supports vectors and matrices only")

    def bw(g):
        if a.ndim == 2 and b.ndim == 2:
            a.grad += g @ b.data.T
            b.grad += a.data.T @ g
        elif a.ndim == 1 and b.ndim == 2:
            a.grad += b.data @ g
            b.grad += np.outer(a.data, g)
        elif a.ndim == 2:
            a.grad += np.outer(g, b.data)
            b.grad += a.data.T @ g
        else:
            a.grad += g * b.data
            b.grad += g * a.data
    return Value(a.data @ b.data, (a, b), bw, "matmul")


def rowmix(h, w) -> Value:
    """``h @ w`` for an (N, C) by (C, K) product, accumulated in a fixed order.

    Each output row is computed with the same elementwise sequence regardless of
    its position, so results are bit-identical under row permutations.
    """
    h, w = as_value(h), as_value(w)
    if h.ndim != 2 or w.ndim != 2 or h.shape[1] != w.shape[0]:
        raise ValueError(f"rowmix: shape mismatch {h.shape} @ {w.shape}")
    out = h.data[:, 0:1] * w.data[0]
    for k in range(1, h.shape[1]):
        out = out + h.data[:, k:k + 1] * w.data[k]

    def bw(g):
        h.grad += g @ w.data.T
        w.grad += h.data.T @ g
    return Value(out, (h, w), bw, "rowmix")


def transpose(a) -> Value:
    a = as_value(a)

    def bw(g):
        a.grad += g.T
    return Value(a.data.T, (a,), bw, "transpose")


def reshape(a, shape) -> Value:
    a = as_value(a)

    def bw(g):
        a.grad += g.reshape(a.shape)
    return Value(a.data.reshape(shape), (a,), bw, "reshape")


def index(a, idx) -> Value:
    """Basic or integer-array indexing (gather); repeated indices accumulate."""
    a = as_value(a)

    def bw(g):
        np.add.at(a.grad, idx, g)
    return Value(a.data[idx], (a,), bw, "index")


def take(a, indices, axis: int) -> Value:
    a = as_value(a)
    indices = np.asarray(indices, dtype=np.int64)

    def bw(g):
        moved = np.moveaxis(a.grad, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
    return Value(np.take(a.data, indices, axis=axis), (a,), bw, "take")


def stack(values: Iterable, axis: int = 0) -> Value:
    values = [as_value(v) for v in values]

    def bw(g):
        for i, v in enumerate(values):
            v.grad += np.take(g, i, axis=axis)
    return Value(np.stack([v.data for v in values], axis=axis), tuple(values), bw, "stack")


def where(cond, a, b) -> Value:
    a, b = as_value(a), as_value(b)
    cond = np.asarray(cond, dtype=bool)

    def bw(g):
        _accum(a, np.where(cond, g, 0.0))
        _accum(b, np.where(cond, 0.0, g))
    return Value(np.where(cond, a.data, b.data), (a, b), bw, "where")


def segment_sum(a, segment_ids, num_segments: int) -> Value:
    """Sum rows of ``a`` (M, K) into ``num_segments`` buckets.

    Within a segment, rows are added in lexicographic order of their values so
    the result does not depend on the order the rows were supplied in.
    """
    a = as_value(a)
    seg = np.asarray(segment_ids, dtype=np.int64)
    data = a.data.reshape(len(seg), int(np.prod(a.shape[1:])))
    keys = tuple(data[:, k] for k in range(data.shape[1] - 1, -1, -1)) + (seg,)
    order = np.lexsort(keys)
    out = np.zeros((num_segments, data.shape[1]), dtype=data.dtype)
    if len(seg):
        sorted_seg = seg[order]
        starts = np.flatnonzero(np.r_[True, sorted_seg[1:] != sorted_seg[:-1]])
        out[sorted_seg[starts]] = np.add.reduceat(data[order], starts, axis=0)
    out = out.reshape((num_segments,) + a.shape[1:])

    def bw(g):
        a.grad += g[seg]
    return Value(out, (a,), bw, "segment_sum")


def gaussian_log_pdf(x, mu, sigma) -> Value:
    """log N(x; mu, sigma**2), broadcasting over all three arguments."""
    x, mu, sigma = as_value(x), as_value(mu), as_value(sigma)
    if np.any(sigma.data <= 0):
        raise ValueError("gaussian_log_pdf: sigma must be positive")
    shape = np.broadcast_shapes(x.shape, mu.shape, sigma.shape)
    z = (x.data - mu.data) / sigma.data
    out = np.broadcast_to(-0.5 * z * z - np.log(sigma.data) - 0.5 * _LOG_2PI, shape).copy()

    def bw(g):
        gz = g * z / sigma.data
        _accum(x, -gz)
        _accum(mu, gz)
        _accum(sigma, g * (z * z - 1.0) / sigma.data)
    return Value(out, (x, mu, sigma), bw, "gaussian_log_pdf")


# --------------------------------------------------------------------------- parameters

@dataclass
class ParamStore:
    """Named unconstrained tensors plus the transform giving their constrained view."""

    raw: dict = field(default_factory=dict)
    constraints: dict = field(default_factory=dict)

    def add(self, name: str, value, constraint: str = "none") -> None:
        if constraint not in CONSTRAINTS:
            raise ValueError(f"unknown constraint {constraint!r}")
        self.raw[name] = np.array(value, dtype=np.float64)
        self.constraints[name] = constraint

    def names(self) -> list[str]:
        return list(self.raw)

    def __contains__(self, name):
        return name in self.raw

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.raw.items()}, dict(self.constraints))

    def bind(self) -> "BoundParams":
        leaves = {k: Value(v) for k, v in self.raw.items()}
        return BoundParams(leaves, {k: constrain(v, self.constraints[k]) for k, v in leaves.items()})

    def constrained(self, name: str) -> np.ndarray:
        return constrain(Value(self.raw[name]), self.constraints[name]).data

    def update(self, new_raw: dict) -> "ParamStore":
        out = self.copy()
        for k, v in new_raw.items():
            out.raw[k] = np.array(v, dtype=np.float64)
        return out


class BoundParams(dict):
    """Constrained parameter Values for one forward pass; ``leaves`` holds the raw inputs."""

    def __init__(self, leaves: dict, views: dict):
        super().__init__(views)
        self.leaves = leaves


def constrain(raw: Value, constraint: str) -> Value:
    if constraint == "none":
        return raw
    if constraint in ("softmax-rows", "softmax-vector"):
        return softmax(raw, axis=-1)
    if constraint == "softplus-positive":
        return add(softplus(raw), SIGMA_FLOOR)
    raise ValueError(f"unknown constraint {constraint!r}")


def unconstrain(value, constraint: str) -> np.ndarray:
    """Raw tensor whose constrained view is ``value`` (up to rounding)."""
    value = np.asarray(value, dtype=np.float64)
    if constraint == "none":
        return value.copy()
    if constraint in ("softmax-rows", "softmax-vector"):
        lv = np.log(np.clip(value, 1e-300, None))
        return lv - lv.mean(axis=-1, keepdims=True)
    if constraint == "softplus-positive":
        y = np.maximum(value - SIGMA_FLOOR, 1e-12)
        return np.where(y > 30, y, np.log(np.expm1(y)))
    raise ValueError(f"unknown constraint {constraint!r}")


def grad(objective: Value, params: BoundParams) -> dict:
    """Gradients of a scalar objective w.r.t. every raw parameter; unused ones are zero."""
    if objective.data.size != 1:
        raise ValueError(f"objective must be scalar, got shape {objective.shape}")
    for leaf in params.leaves.values():
        leaf.grad = None
    objective.backward()
    return {k: (np.zeros_like(v.data) if v.grad is None else v.grad.copy())
            for k, v in params.leaves.items()}


def finite_diff_check(build: Callable[[BoundParams], Value], params: ParamStore,
                      eps: float = 1e-5, precision=np.float64) -> float:
    """Max over coordinates of |analytic - central difference| / (|central difference| + 1e-8).

    ``precision=np.longdouble`` evaluates the shifted objectives in extended
    precision, which keeps round-off in f(p + eps) - f(p - eps) well below the
    1e-8 floor when gradients are tiny relative to |f|. The analytic gradient is
    always computed in double precision.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    bound = params.bind()
    analytic = grad(build(bound), bound)
    base = ParamStore({k: v.astype(precision) for k, v in params.raw.items()}, dict(params.constraints))
    worst = 0.0
    for name, raw in params.raw.items():
        for idx in np.ndindex(raw.shape):
            shifted = []
            for step in (eps, -eps):
                p = base.copy()
                p.raw[name][idx] += step
                shifted.append(build(p.bind()).data.reshape(()))
            numeric = float((shifted[0] - shifted[1]) / (2 * eps))
            err = abs(analytic[name][idx] - numeric) / (abs(numeric) + 1e-8)
            worst = max(worst, err)
    return worst


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamStore, grads: dict, state: AdamState) -> tuple[ParamStore, AdamState]:
    """One Adam update that *ascends* the objective. Inputs are not modified."""
    t = state.step + 1
    new = AdamState(state.lr, state.beta1, state.beta2, state.eps, t, {}, {})
    raw = {}
    for name, g in grads.items():
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        if m.shape != g.shape:
            raise ValueError(f"moment shape mismatch for {name}")
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        raw[name] = params.raw[name] + state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new.m[name], new.v[name] = m, v
    return params.update(raw), new
