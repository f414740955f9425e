"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Tensor`` records the op that produced it and closures that push an
upstream gradient back to its inputs. ``Tensor.backward`` walks the recorded
graph in reverse topological order.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)

_PRECISIONS = {"f64": np.float64, "f32": np.float32}


class NumericError(ArithmeticError):
    """A non-finite value appeared in a forward or backward pass."""


class ShapeError(ValueError):
    pass


def default_dtype() -> type:
    name = os.environ.get("FEDRIR_PRECISION", "f64").lower()
    if name not in _PRECISIONS:
        raise ValueError(f"FEDRIR_PRECISION must be one of {sorted(_PRECISIONS)}, got {name!r}")
    return _PRECISIONS[name]


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by op '{op}'")


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "name", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        name: str | None = None,
        op: str = "leaf",
        parents: tuple[Tensor, ...] = (),
        backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
    ):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(default_dtype())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.op = op
        self.name = name
        self._parents = parents
        self._backward = backward

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(op={self.op!r}, shape={self.shape}{label})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def parents(self) -> tuple[Tensor, ...]:
        return self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> Tensor:
        return Tensor(self.data, name=self.name)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if self.data.size != 1:
            _not_scalar(self)
        order = topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                _check_finite(pg, f"d{node.op}")
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _not_scalar(t: Tensor):
    raise ShapeError(f"expected a single-element tensor, got shape {t.shape}")


def topological_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=default_dtype()))


def _node(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    _check_finite(data, op)
    return Tensor(data, op=op, parents=parents, backward=backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data + b.data,
        "add",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data - b.data,
        "sub",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data * b.data,
        "mul",
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def bias_add(x, b) -> Tensor:
    """Add a row vector ``b`` of shape (k,) to every row of ``x`` (B, k)."""
    x, b = as_tensor(x), as_tensor(b)
    if b.data.ndim != 1 or x.data.ndim != 2 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"bias_add: cannot add bias {b.shape} to {x.shape}")
    return _node(x.data + b.data, "bias_add", (x, b), lambda g: (g, g.sum(axis=0)))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0).astype(x.data.dtype), "relu", (x,), lambda g: (g * mask,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _node(out, "exp", (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NumericError("log of a non-positive value")
    return _node(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


def clamp(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _node(np.clip(x.data, lo, hi), "clamp", (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# structural


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, "matmul", (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def backward(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _node(out, "concat", ts, backward)


def split_columns(x: Tensor, at: int) -> tuple[Tensor, Tensor]:
    """Split (B, k) into (B, :at) and (B, at:)."""
    return take_columns(x, 0, at), take_columns(x, at, x.shape[1])


def take_columns(x: Tensor, lo: int, hi: int) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, lo:hi] = g
        return (full,)

    return _node(x.data[:, lo:hi], "take_columns", (x,), backward)


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows ``x[index]``; repeated indices accumulate in the gradient."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(x.data[index], "take_rows", (x,), backward)


# ---------------------------------------------------------------------------
# reductions and fused losses


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.asarray(x.data.sum()), "sum", (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return _node(
        np.asarray(x.data.mean()), "mean", (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),)
    )


def squared_error_mean(pred, target) -> Tensor:
    """Mean of squared differences over every element."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"squared_error_mean: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    return _node(
        np.asarray((diff * diff).mean()),
        "squared_error_mean",
        (pred, target),
        lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n),
    )


def gaussian_log_density(x, mean, log_var) -> Tensor:
    """Per-row log-density of ``x`` under a diagonal Gaussian, shape (B,)."""
    x, mean, log_var = as_tensor(x), as_tensor(mean), as_tensor(log_var)
    if not (x.shape == mean.shape == log_var.shape) or x.data.ndim != 2:
        raise ShapeError(
            f"gaussian_log_density: shapes {x.shape}, {mean.shape}, {log_var.shape} must match (B, k)"
        )
    diff = x.data - mean.data
    inv_var = np.exp(-log_var.data)
    sq = diff * diff * inv_var
    out = -0.5 * (LOG_2PI + log_var.data + sq).sum(axis=1)

    def backward(g):
        g = g[:, None]
        d_x = -g * diff * inv_var
        return d_x, -d_x, -0.5 * g * (1.0 - sq)

    return _node(out, "gaussian_log_density", (x, mean, log_var), backward)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape}, labels {labels.shape}")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(n)
    loss = -log_p[rows, labels].mean()

    def backward(g):
        d = np.exp(log_p)
        d[rows, labels] -= 1.0
        return (g * d / n,)

    return _node(np.asarray(loss), "softmax_cross_entropy", (logits,), backward)


# ---------------------------------------------------------------------------
# graphs


@dataclass
class NodeRecord:
    id: int
    op: str
    inputs: tuple[int, ...]
    shape: tuple[int, ...]


@dataclass
class Graph:
    """A traced computation: ``build`` maps named input tensors to named outputs.

    ``trainable`` names the bindings that receive gradients in ``backward``.
    """

    build: Callable[[Mapping[str, Tensor]], Mapping[str, Tensor]]
    input_shapes: dict[str, tuple[int, ...]]
    trainable: frozenset[str] = field(default_factory=frozenset)

    def _leaves(self, bindings: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        missing = set(self.input_shapes) - set(bindings)
        if missing:
            raise KeyError(f"unbound graph inputs: {sorted(missing)}")
        leaves = {}
        for name, shape in self.input_shapes.items():
            arr = np.asarray(bindings[name])
            if tuple(arr.shape) != tuple(shape):
                raise ShapeError(f"binding {name!r}: expected shape {tuple(shape)}, got {arr.shape}")
            leaves[name] = Tensor(arr, requires_grad=name in self.trainable, name=name)
        return leaves

    def trace(self, bindings: Mapping[str, np.ndarray]) -> list[NodeRecord]:
        """Topologically ordered op records of every output."""
        outputs = self.build(self._leaves(bindings))
        order: list[Tensor] = []
        seen: set[int] = set()
        for out in outputs.values():
            for node in topological_order(out):
                if id(node) not in seen:
                    seen.add(id(node))
                    order.append(node)
        index = {id(n): i for i, n in enumerate(order)}
        return [
            NodeRecord(i, n.op, tuple(index[id(p)] for p in n.parents), n.shape)
            for i, n in enumerate(order)
        ]


def forward(graph: Graph, bindings: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    outputs = graph.build(graph._leaves(bindings))
    return {name: t.data for name, t in outputs.items()}


def backward(graph: Graph, bindings: Mapping[str, np.ndarray], output: str) -> dict[str, np.ndarray]:
    """Gradient of the scalar ``output`` w.r.t. every trainable binding."""
    leaves = graph._leaves(bindings)
    outputs = graph.build(leaves)
    root = outputs[output]
    root.backward()
    return {
        name: leaves[name].grad if leaves[name].grad is not None else np.zeros_like(leaves[name].data)
        for name in sorted(graph.trainable)
    }


def finite_difference_gradient(
    f: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    names: Iterable[str] | None = None,
) -> dict[str, np.ndarray]:
    """Central-difference estimate of df/dp for every coordinate of ``params``."""
    if h <= 0:
        raise ValueError("h must be positive")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    grads = {}
    for name in names if names is not None else work:
        arr = work[name]
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(work))
            flat[i] = orig - h
            fm = float(f(work))
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError(f"non-finite function value while differencing {name}[{i}]")
            gflat[i] = (fp - fm) / (2.0 * h)
        grads[name] = g
    return grads


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale))
