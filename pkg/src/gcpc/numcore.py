"""Reverse-mode autodiff over dense float64 numpy arrays.

Every op builds a node holding its forward value, its parents and a closure
mapping the output gradient to one gradient per parent.  ``backward_pass``
walks the graph in reverse topological order.  A handful of fused ops
(``lstm_sequence``; the transducer loss lives in :mod:`gcpc.losses`) carry
hand-written backward passes and are checked against ``finite_diff_gradient``
in the test suite.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def _check_finite(arr: np.ndarray, what: str = "tensor") -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value in {what}")


class Tensor:
    """A node in the computation graph.

    Leaves are created directly; interior nodes come from the op functions
    below.  ``grad`` is only populated by :func:`backward_pass`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if arr.size == 0:
            raise DimensionError("tensor must have at least one element")
        _check_finite(arr, op)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, pow_(other, -1.0))
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not any(p.requires_grad for p in parents):
        return Tensor(value, op=op)
    return Tensor(value, _parents=parents, _backward=backward, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def pow_(a: Tensor, p: float) -> Tensor:
    out = a.data ** p
    return _node(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise NumericError("log of non-positive value")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------- reductions / shape

def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def take(a: Tensor, idx) -> Tensor:
    """Basic or fancy indexing; repeated indices accumulate in backward."""
    out = a.data[idx]
    parts = idx if isinstance(idx, tuple) else (idx,)
    fancy = any(isinstance(p, (np.ndarray, list)) for p in parts)

    def backward(g):
        if fancy:
            # bincount over flat positions sums repeated picks in a fixed order
            pos = np.arange(a.data.size).reshape(a.shape)[idx]
            return (np.bincount(pos.ravel(), weights=np.ravel(g), minlength=a.data.size).reshape(a.shape),)
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _node(np.array(out, copy=True), (a,), backward, "take")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _node(out, xs, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.stack([x.data for x in xs], axis=axis)
    n = len(xs)
    return _node(out, xs,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), "stack")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for a of rank >= 1 and b of rank 2 (weight-style right operand)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _node(out, (a, b), backward, "matmul")


def affine_forward(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``W x + b``; x may carry leading batch axes (last axis is features)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1] != W.shape[1]:
        raise DimensionError(f"affine shapes x{x.shape} W{W.shape} b{b.shape}")
    out = x.data @ W.data.T + b.data

    def backward(g):
        g2 = g.reshape(-1, W.shape[0])
        gx = g @ W.data
        gW = g2.T @ x.data.reshape(-1, W.shape[1])
        return gx, gW, g2.sum(axis=0)

    return _node(out, (x, W, b), backward, "affine")


# ---------------------------------------------------------------- softmax family

def _logsumexp_np(x: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    out = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError("log_softmax needs a non-empty axis")
    out = x.data - _logsumexp_np(x.data, axis=axis, keepdims=True)
    soft = np.exp(out)
    return _node(out, (x,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),), "log_softmax")


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    out = _logsumexp_np(x.data, axis=axis)
    soft = np.exp(x.data - np.expand_dims(out, axis))
    return _node(out, (x,), lambda g: (np.expand_dims(g, axis) * soft,), "logsumexp")


# ---------------------------------------------------------------- fused LSTM

def lstm_sequence(x: Tensor, Wx: Tensor, Wh: Tensor, b: Tensor) -> Tensor:
    """Run an LSTM left to right over ``x`` of shape (B, T, I) from zero state.

    Gate layout in the 4H rows of the weights is (input, forget, cell, output).
    Returns hidden states (B, T, H).  Backward is truncation-free BPTT.
    """
    B, T, I = x.shape
    H = Wh.shape[1]
    if Wx.shape != (4 * H, I) or Wh.shape != (4 * H, H) or b.shape != (4 * H,):
        raise DimensionError(f"lstm shapes x{x.shape} Wx{Wx.shape} Wh{Wh.shape} b{b.shape}")
    xs = x.data @ Wx.data.T + b.data          # (B, T, 4H) input projections
    hs = np.zeros((B, T + 1, H))
    cs = np.zeros((B, T + 1, H))
    gates = np.empty((B, T, 4 * H))
    WhT = Wh.data.T
    for t in range(T):
        a = xs[:, t] + hs[:, t] @ WhT
        i = _sigmoid(a[:, :H])
        f = _sigmoid(a[:, H:2 * H])
        g = np.tanh(a[:, 2 * H:3 * H])
        o = _sigmoid(a[:, 3 * H:])
        cs[:, t + 1] = f * cs[:, t] + i * g
        hs[:, t + 1] = o * np.tanh(cs[:, t + 1])
        gates[:, t, :H], gates[:, t, H:2 * H], gates[:, t, 2 * H:3 * H], gates[:, t, 3 * H:] = i, f, g, o

    def backward(gout):
        da_all = np.empty((B, T, 4 * H))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        Whd = Wh.data
        for t in range(T - 1, -1, -1):
            i, f, g, o = (gates[:, t, :H], gates[:, t, H:2 * H],
                          gates[:, t, 2 * H:3 * H], gates[:, t, 3 * H:])
            tc = np.tanh(cs[:, t + 1])
            dh = gout[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            da = da_all[:, t]
            da[:, :H] = dc * g * i * (1.0 - i)
            da[:, H:2 * H] = dc * cs[:, t] * f * (1.0 - f)
            da[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
            da[:, 3 * H:] = dh * tc * o * (1.0 - o)
            dh_next = da @ Whd
            dc_next = dc * f
        flat = da_all.reshape(-1, 4 * H)
        dx = da_all @ Wx.data
        dWx = flat.T @ x.data.reshape(-1, I)
        dWh = flat.T @ hs[:, :T].reshape(-1, H)
        return dx, dWx, dWh, flat.sum(axis=0)

    return _node(hs[:, 1:].copy(), (x, Wx, Wh, b), backward, "lstm_sequence")


# ---------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward_pass(root: Tensor, params: "ParameterStore | None" = None) -> "OrderedDict[str, np.ndarray] | None":
    """Accumulate d(root)/d(node) into ``.grad`` of every reachable leaf.

    With ``params`` given, returns an ordered name -> gradient map covering
    every entry of the store (zeros where the root does not depend on it).
    """
    if root.data.size != 1:
        raise ContractError(f"backward_pass needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + gp
            else:
                grads[key] = np.asarray(gp, dtype=np.float64)
    if params is None:
        return None
    return OrderedDict(
        (name, t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.items()
    )


# ---------------------------------------------------------------- parameters

class ParameterStore:
    """Insertion-ordered name -> leaf tensor map with a trainable flag per entry."""

    def __init__(self):
        self._tensors: "OrderedDict[str, Tensor]" = OrderedDict()
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=trainable)
        self._tensors[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self):
        return iter(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, name: str, flag: bool) -> None:
        self._trainable[name] = flag
        self._tensors[name].requires_grad = flag

    def freeze(self, prefix: str = "") -> None:
        for name in self._tensors:
            if name.startswith(prefix):
                self.set_trainable(name, False)

    def trainable_names(self) -> list[str]:
        return [n for n in self._tensors if self._trainable[n]]

    def set_value(self, name: str, value) -> None:
        arr = np.array(value, dtype=np.float64)
        if arr.shape != self._tensors[name].shape:
            raise DimensionError(f"{name}: shape {arr.shape} != {self._tensors[name].shape}")
        _check_finite(arr, name)
        self._tensors[name].data = arr

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def snapshot(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, t.data.copy()) for n, t in self._tensors.items())

    def subset(self, prefixes: Iterable[str]) -> "ParameterStore":
        """New store sharing the tensors whose names start with any prefix."""
        prefixes = tuple(prefixes)
        out = ParameterStore()
        for n, t in self._tensors.items():
            if n.startswith(prefixes):
                out._tensors[n] = t
                out._trainable[n] = self._trainable[n]
        return out


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParameterStore, grads: dict, state: AdamState) -> AdamState:
    """One bias-corrected Adam update of every trainable entry, in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in params.trainable_names():
        p = params[name]
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"grad shape {g.shape} != param {name} shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# ---------------------------------------------------------------- gradient oracle

def finite_diff_gradient(f: Callable[[], float], params: ParameterStore, eps: float = 1e-5,
                         names: Sequence[str] | None = None) -> "OrderedDict[str, np.ndarray]":
    """Central differences of the scalar ``f()`` w.r.t. each parameter entry.

    ``f`` closes over ``params`` and is re-evaluated with each coordinate nudged.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name in (names if names is not None else params.names()):
        t = params[name]
        base = t.data
        grad = np.zeros_like(base)
        for i in np.ndindex(base.shape):
            up = base.copy()
            up[i] += eps
            t.data = up
            fp = float(f())
            dn = base.copy()
            dn[i] -= eps
            t.data = dn
            fm = float(f())
            if not (np.isfinite(fp) and np.isfinite(fm)):
                t.data = base
                raise NumericError(f"non-finite evaluation while differencing {name}{i}")
            grad[i] = (fp - fm) / (2.0 * eps)
        t.data = base
        out[name] = grad
    return out


def relative_error(a, b, floor: float = 1e-12) -> float:
    """``||a - b|| / max(||a||, ||b||)`` over the flattened arrays (or lists of arrays)."""
    a = np.concatenate([np.ravel(x) for x in a]) if isinstance(a, (list, tuple)) else np.ravel(a)
    b = np.concatenate([np.ravel(x) for x in b]) if isinstance(b, (list, tuple)) else np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
