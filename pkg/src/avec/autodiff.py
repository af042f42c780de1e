"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

A graph is built eagerly as operations are applied to :class:`Tensor` objects
and consumed by a single call to :meth:`Tensor.backward` (or :func:`grad`).
Graphs are never reused: evaluate the loss again to differentiate again.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "GraphError", "NonFiniteError", "ShapeError",
    "as_tensor", "concat", "minimum", "maximum", "where", "grad",
    "MLP", "forward", "orthogonal",
    "AdamState", "adam_step", "Adam", "clip_grad_norm",
    "save_params", "load_params", "params_digest",
]


class GraphError(RuntimeError):
    """Raised when a computation graph is misused (e.g. backward twice)."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward value or a gradient contains NaN or Inf."""


class ShapeError(ValueError):
    pass


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")
    return arr


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out axes that were broadcast in the forward pass
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tensor:
    """A float64 array node in a computation graph.

    ``grad`` is only populated on leaves by :meth:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = _check_finite(arr, name or "tensor")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph construction ----------------------------------------------
    @staticmethod
    def _make(out: np.ndarray, parents: tuple, backward: Callable, op: str) -> "Tensor":
        _check_finite(out, f"forward of {op}")
        needs = any(p.requires_grad for p in parents)
        if not needs:
            return Tensor(out)
        return Tensor(out, requires_grad=True, _parents=parents, _backward=backward)

    def __add__(self, other):
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(self.data + other.data, (self, other),
                            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)), "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(self.data - other.data, (self, other),
                            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)), "sub")

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(a * b, (self, other),
                            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(a / b, (self, other),
                            lambda g: (_unbroadcast(g / b, a.shape),
                                       _unbroadcast(-g * a / (b * b), b.shape)), "div")

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        a = self.data
        p = float(exponent)
        if p == 2.0:
            return Tensor._make(a * a, (self,), lambda g: (2.0 * a * g,), "square")
        return Tensor._make(a ** p, (self,), lambda g: (p * a ** (p - 1.0) * g,), "pow")

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
        return Tensor._make(a @ b, (self, other), lambda g: (g @ b.T, a.T @ g), "matmul")

    def __getitem__(self, idx):
        shape = self.shape

        def back(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor._make(np.array(self.data[idx]), (self,), back, "getitem")

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(np.sum(self.data, axis=axis, keepdims=keepdims), (self,), back, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        old = self.shape
        return Tensor._make(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),), "reshape")

    def tanh(self) -> "Tensor":
        t = np.tanh(self.data)
        return Tensor._make(t, (self,), lambda g: (g * (1.0 - t * t),), "tanh")

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor._make(np.where(mask, self.data, 0.0), (self,), lambda g: (g * mask,), "relu")

    def exp(self) -> "Tensor":
        e = np.exp(self.data)
        return Tensor._make(e, (self,), lambda g: (g * e,), "exp")

    def log(self) -> "Tensor":
        a = self.data
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.log(a)
        return Tensor._make(out, (self,), lambda g: (g / a,), "log")

    def softplus(self) -> "Tensor":
        a = self.data
        out = np.logaddexp(0.0, a)
        return Tensor._make(out, (self,), lambda g: (g / (1.0 + np.exp(-a)),), "softplus")

    def clip(self, lo: float, hi: float) -> "Tensor":
        a = self.data
        mask = (a >= lo) & (a <= hi)
        return Tensor._make(np.clip(a, lo, hi), (self,), lambda g: (g * mask,), "clip")

    # -- differentiation ---------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        grads, leaves = _backprop(self)
        for leaf in leaves:
            g = grads.get(id(leaf))
            if g is None:
                g = np.zeros_like(leaf.data)
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back, "concat")


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return Tensor._make(np.where(cond, a.data, b.data), (a, b),
                        lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                                   _unbroadcast(np.where(cond, 0.0, g), b.shape)), "where")


def minimum(a, b) -> Tensor:
    # ties send the gradient to the first argument
    a, b = as_tensor(a), as_tensor(b)
    return where(a.data <= b.data, a, b)


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return where(a.data >= b.data, a, b)


def _backprop(root: Tensor) -> tuple[dict, list]:
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {root.shape}")
    if root._consumed:
        raise GraphError("graph already consumed by backward; re-evaluate the loss first")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves = []
    for node in reversed(order):
        g = grads.pop(id(node), None) if node._parents else grads.get(id(node))
        if not node._parents:
            leaves.append(node)
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            _check_finite(pg, "gradient")
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        node._parents = ()
        node._backward = None
    root._consumed = True
    return grads, leaves


def grad(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. ``params`` without touching ``.grad``.

    Parameters the loss does not depend on get zeros.
    """
    grads, _ = _backprop(loss)
    return [grads.get(id(p), np.zeros_like(p.data)).copy() for p in params]


# ---------------------------------------------------------------------------
# layers


def orthogonal(shape: tuple[int, int], gain: float, rng: np.random.Generator) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


_ACTIVATIONS = {"tanh": Tensor.tanh, "relu": Tensor.relu}


class MLP:
    """Fully connected network; hidden layers use ``activation``, the output is linear.

    Weights are stored as (in, out) so a batch ``x`` of shape (n, in) maps to
    ``x @ W + b``.
    """

    def __init__(self, sizes: Sequence[int], activation: str = "tanh",
                 rng: np.random.Generator | None = None, out_gain: float = 0.01,
                 name: str = "mlp"):
        if len(sizes) < 2 or any(int(s) <= 0 for s in sizes):
            raise ShapeError(f"invalid layer widths {sizes}")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.sizes = [int(s) for s in sizes]
        self.activation = activation
        self.name = name
        hidden_gain = math.sqrt(2.0) if activation == "relu" else 1.0
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        n_layers = len(self.sizes) - 1
        for i, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            gain = out_gain if i == n_layers - 1 else hidden_gain
            self.weights.append(Tensor(orthogonal((n_in, n_out), gain, rng), requires_grad=True,
                                       name=f"{name}.{i}.weight"))
            self.biases.append(Tensor(np.zeros(n_out), requires_grad=True, name=f"{name}.{i}.bias"))

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, x) -> Tensor:
        h = as_tensor(x)
        squeeze = h.ndim == 1
        if squeeze:
            h = h.reshape(1, -1)
        if h.shape[-1] != self.sizes[0]:
            raise ShapeError(f"{self.name}: expected input width {self.sizes[0]}, got {h.shape[-1]}")
        act = _ACTIVATIONS[self.activation]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = act(h)
        return h.reshape(-1) if squeeze else h

    def predict(self, x) -> np.ndarray:
        """Evaluate without recording gradients."""
        return forward_numpy(self, np.asarray(x, dtype=np.float64))


def forward(net: MLP, x) -> Tensor:
    return net(x)


def forward_numpy(net: MLP, x: np.ndarray) -> np.ndarray:
    squeeze = x.ndim == 1
    h = x.reshape(1, -1) if squeeze else x
    if h.shape[-1] != net.sizes[0]:
        raise ShapeError(f"{net.name}: expected input width {net.sizes[0]}, got {h.shape[-1]}")
    act = np.tanh if net.activation == "tanh" else (lambda z: np.maximum(z, 0.0))
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w.data + b.data
        if i < last:
            h = act(h)
    _check_finite(h, f"forward of {net.name}")
    return h.reshape(-1) if squeeze else h


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 2.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Iterable, **kwargs) -> "AdamState":
        arrays = [p.data if isinstance(p, Tensor) else np.asarray(p) for p in params]
        return cls(m=[np.zeros_like(a) for a in arrays], v=[np.zeros_like(a) for a in arrays], **kwargs)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new arrays and a new state."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ShapeError("params, grads and state differ in length")
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if np.shape(p) != np.shape(g) or np.shape(p) != m.shape:
            raise ShapeError(f"shape mismatch {np.shape(p)} / {np.shape(g)} / {m.shape}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        new_p.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t, state.lr, state.beta1, state.beta2, state.eps)


class Adam:
    """Adam over a list of parameter tensors, updated in place."""

    def __init__(self, params: Sequence[Tensor], lr: float = 2.5e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState.zeros_like(self.params, lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self, grads: Sequence[np.ndarray]) -> None:
        new, self.state = adam_step([p.data for p in self.params], grads, self.state)
        for p, arr in zip(self.params, new):
            p.data = _check_finite(arr, p.name or "parameter")


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return list(grads), norm
    scale = max_norm / norm
    return [g * scale for g in grads], norm


# ---------------------------------------------------------------------------
# checkpoints
#
# {"format": "avec-params", "version": 1,
#  "params": [{"name": str, "shape": [int, ...], "values": [float, ...]}, ...],
#  "extra": {...}}            optional, free-form JSON
# values are row-major; json's float repr round-trips float64 exactly.

CHECKPOINT_FORMAT = "avec-params"


def save_params(path, params: Sequence[Tensor], extra: dict | None = None) -> None:
    """Write parameters (and an optional JSON-serialisable ``extra`` payload) to ``path``."""
    entries = [{"name": p.name, "shape": list(p.shape), "values": p.data.ravel().tolist()} for p in params]
    doc = {"format": CHECKPOINT_FORMAT, "version": 1, "params": entries}
    if extra is not None:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc))


def load_params(path, params: Sequence[Tensor] | None = None, with_extra: bool = False):
    """Read a checkpoint; if ``params`` is given, copy values into them by name.

    Returns the (name, array) list, or (list, extra dict) with ``with_extra``.
    """
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an {CHECKPOINT_FORMAT} file")
    loaded = [(e["name"], np.array(e["values"], dtype=np.float64).reshape(e["shape"])) for e in doc["params"]]
    if params is not None:
        by_name = dict(loaded)
        for p in params:
            if p.name not in by_name:
                raise KeyError(f"{path}: missing parameter {p.name}")
            if by_name[p.name].shape != p.shape:
                raise ShapeError(f"{p.name}: checkpoint shape {by_name[p.name].shape} != {p.shape}")
            p.data = by_name[p.name].copy()
    return (loaded, doc.get("extra", {})) if with_extra else loaded


def params_digest(params: Sequence[Tensor]) -> str:
    import hashlib

    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
