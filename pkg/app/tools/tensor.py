# app/tools/tensor.py
"""
Dense float64 tensors with an eagerly evaluated tape for reverse-mode
differentiation.

A Graph owns an ordered list of nodes. Every primitive appends one node whose
forward value is computed immediately; node ids are list positions, so the
list is already in topological order and backward() walks it in reverse.
Values are read-only once a node exists.
"""
from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


class NonFiniteError(FloatingPointError):
    """A node produced NaN or Inf."""


PRIMITIVES = frozenset({
    "matmul", "add", "multiply", "negate", "exponent", "logarithm",
    "sigmoid", "tanh", "relu", "softplus", "reduce_sum", "reduce_mean",
    "broadcast", "concat", "slice", "gather", "grl", "clamp",
})

LEAF_KINDS = frozenset({"constant", "parameter"})

ACTIVATIONS = ("identity", "sigmoid", "tanh", "relu", "softplus")


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# Parameters and nodes
# ---------------------------------------------------------------------------

class Parameter:
    """Persistent named trainable array. Survives across graphs; `grad` is
    overwritten by every backward() over a graph it was bound into."""

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.array(value, dtype=np.float64, copy=True)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple:
        return tuple(self.value.shape)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class Tensor:
    __slots__ = ("value", "grad", "node_id", "kind", "inputs", "attrs", "graph", "parameter")

    def __init__(self, value, graph: Optional["Graph"] = None, node_id: int = -1,
                 kind: str = "constant", inputs: tuple = (), attrs: Optional[dict] = None,
                 parameter: Optional[Parameter] = None):
        self.value = _readonly(value)
        self.grad: Optional[np.ndarray] = None
        self.graph = graph
        self.node_id = node_id
        self.kind = kind
        self.inputs = inputs
        self.attrs = attrs or {}
        self.parameter = parameter

    @property
    def shape(self) -> tuple:
        return tuple(self.value.shape)

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the value."""
        return self.value.reshape(-1)

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.value.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return np.array(self.value)

    # Operator sugar; all of it lands on build_primitive.
    def _g(self, other=None) -> "Graph":
        if self.graph is not None:
            return self.graph
        if isinstance(other, Tensor) and other.graph is not None:
            return other.graph
        raise ValueError("tensor is not attached to a graph")

    def __add__(self, other):
        g = self._g(other)
        return g.add(self, g.coerce(other, like=self))

    __radd__ = __add__

    def __sub__(self, other):
        g = self._g(other)
        return g.add(self, g.negate(g.coerce(other, like=self)))

    def __rsub__(self, other):
        g = self._g(other)
        return g.add(g.coerce(other, like=self), g.negate(self))

    def __mul__(self, other):
        g = self._g(other)
        return g.multiply(self, g.coerce(other, like=self))

    __rmul__ = __mul__

    def __neg__(self):
        return self._g().negate(self)

    def __matmul__(self, other):
        g = self._g(other)
        return g.matmul(self, g.coerce(other))

    def __repr__(self) -> str:
        return f"Tensor(id={self.node_id}, kind={self.kind}, shape={self.shape})"


# ---------------------------------------------------------------------------
# Forward / backward rules
# ---------------------------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _check_shapes(kind: str, vals: list, attrs: dict) -> None:
    shapes = [v.shape for v in vals]
    unary = {"negate", "exponent", "logarithm", "sigmoid", "tanh", "relu",
             "softplus", "reduce_sum", "reduce_mean", "broadcast", "slice", "gather", "grl", "clamp"}
    if kind in unary and len(vals) != 1:
        raise ShapeError(f"{kind} takes one input, got shapes {shapes}")
    if kind in ("add", "multiply"):
        if len(vals) != 2 or shapes[0] != shapes[1]:
            raise ShapeError(f"{kind} needs two inputs of identical shape, got {shapes}")
    elif kind == "matmul":
        if len(vals) != 2:
            raise ShapeError(f"matmul takes two inputs, got shapes {shapes}")
        a, b = shapes
        if len(b) != 2 or len(a) not in (1, 2) or a[-1] != b[0]:
            raise ShapeError(f"matmul shape mismatch: {a} x {b}")
    elif kind == "broadcast":
        target = tuple(attrs["shape"])
        try:
            np.broadcast_shapes(shapes[0], target)
        except ValueError:
            raise ShapeError(f"cannot broadcast {shapes[0]} to {target}") from None
        if np.broadcast_shapes(shapes[0], target) != target:
            raise ShapeError(f"cannot broadcast {shapes[0]} to {target}")
    elif kind == "concat":
        if not vals:
            raise ShapeError("concat needs at least one input")
        axis = attrs["axis"]
        ref = list(shapes[0])
        for s in shapes[1:]:
            if len(s) != len(ref) or any(d != r for i, (d, r) in enumerate(zip(s, ref))
                                         if i != axis % len(ref)):
                raise ShapeError(f"concat along axis {axis} mismatch: {shapes}")
    elif kind == "slice":
        axis, start, stop = attrs["axis"], attrs["start"], attrs["stop"]
        n = shapes[0][axis]
        if not (0 <= start < stop <= n):
            raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of {shapes[0]}")
    elif kind == "gather":
        if not shapes[0]:
            raise ShapeError("gather needs at least one axis")
        index, n = attrs["index"], shapes[0][0]
        if index.ndim != 1 or (index.size and (index.min() < 0 or index.max() >= n)):
            raise ShapeError(f"gather index out of range for {n} rows")
    elif kind in ("reduce_sum", "reduce_mean"):
        axis = attrs.get("axis")
        if axis is not None and not (-len(shapes[0]) <= axis < len(shapes[0])):
            raise ShapeError(f"{kind} axis {axis} invalid for shape {shapes[0]}")
    elif kind == "grl" and attrs.get("alpha", 0.0) < 0:
        raise ValueError(f"grl alpha must be >= 0, got {attrs['alpha']}")


def _forward(kind: str, vals: list, attrs: dict) -> np.ndarray:
    if kind == "matmul":
        return vals[0] @ vals[1]
    if kind == "add":
        return vals[0] + vals[1]
    if kind == "multiply":
        return vals[0] * vals[1]
    x = vals[0]
    if kind == "negate":
        return -x
    if kind == "exponent":
        return np.exp(x)
    if kind == "logarithm":
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(x)
    if kind == "sigmoid":
        return _sigmoid(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "softplus":
        return np.logaddexp(0.0, x)
    if kind == "reduce_sum":
        return np.sum(x, axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))
    if kind == "reduce_mean":
        return np.mean(x, axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))
    if kind == "broadcast":
        return np.broadcast_to(x, tuple(attrs["shape"])).copy()
    if kind == "concat":
        return np.concatenate(vals, axis=attrs["axis"])
    if kind == "slice":
        idx = [slice(None)] * x.ndim
        idx[attrs["axis"]] = slice(attrs["start"], attrs["stop"])
        return x[tuple(idx)]
    if kind == "gather":
        return x[attrs["index"]]
    if kind == "grl":
        return x.copy()
    if kind == "clamp":
        return np.maximum(x, attrs["lower"])
    raise ValueError(f"unknown primitive kind: {kind}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _backward(kind: str, g: np.ndarray, vals: list, out: np.ndarray, attrs: dict) -> list:
    if kind == "matmul":
        a, b = vals
        if a.ndim == 1:
            return [g @ b.T, np.outer(a, g)]
        return [g @ b.T, a.T @ g]
    if kind == "add":
        return [g, g]
    if kind == "multiply":
        return [g * vals[1], g * vals[0]]
    x = vals[0]
    if kind == "negate":
        return [-g]
    if kind == "exponent":
        return [g * out]
    if kind == "logarithm":
        return [g / x]
    if kind == "sigmoid":
        return [g * out * (1.0 - out)]
    if kind == "tanh":
        return [g * (1.0 - out * out)]
    if kind == "relu":
        return [g * (x > 0.0)]
    if kind == "softplus":
        return [g * _sigmoid(x)]
    if kind in ("reduce_sum", "reduce_mean"):
        axis = attrs.get("axis")
        if axis is not None and not attrs.get("keepdims", False):
            g = np.expand_dims(g, axis)
        full = np.broadcast_to(g, x.shape)
        if kind == "reduce_mean":
            count = x.size if axis is None else x.shape[axis]
            full = full / count
        return [np.array(full)]
    if kind == "broadcast":
        return [_unbroadcast(g, x.shape)]
    if kind == "concat":
        axis = attrs["axis"]
        bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
        return list(np.split(g, bounds, axis=axis))
    if kind == "slice":
        gx = np.zeros_like(x)
        idx = [slice(None)] * x.ndim
        idx[attrs["axis"]] = slice(attrs["start"], attrs["stop"])
        gx[tuple(idx)] = g
        return [gx]
    if kind == "gather":
        gx = np.zeros_like(x)
        np.add.at(gx, attrs["index"], g)
        return [gx]
    if kind == "grl":
        return [-attrs["alpha"] * g]
    if kind == "clamp":
        return [g * (x > attrs["lower"])]
    raise ValueError(f"no backward rule for {kind}")


# ---------------------------------------------------------------------------
# Graph
# ---------------------------------------------------------------------------

class Graph:
    """Tape of primitive-op records. One graph per training step."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._bound: dict[int, Tensor] = {}

    def _append(self, value, kind, inputs=(), attrs=None, parameter=None) -> Tensor:
        node = Tensor(value, graph=self, node_id=len(self.nodes), kind=kind,
                      inputs=tuple(inputs), attrs=attrs, parameter=parameter)
        if not np.all(np.isfinite(node.value)):
            raise NonFiniteError(f"node {node.node_id} ({kind}) produced non-finite values")
        self.nodes.append(node)
        return node

    # -- leaves ------------------------------------------------------------
    def constant(self, value) -> Tensor:
        if isinstance(value, Tensor):
            value = value.value
        return self._append(np.asarray(value, dtype=np.float64), "constant")

    def param(self, parameter: Parameter) -> Tensor:
        """Bind a Parameter; binding the same Parameter twice returns one node."""
        key = id(parameter)
        if key not in self._bound:
            self._bound[key] = self._append(parameter.value, "parameter", parameter=parameter)
        return self._bound[key]

    def coerce(self, x, like: Optional[Tensor] = None) -> Tensor:
        """Turn a Tensor, array or scalar into a node of this graph. Scalars
        are broadcast to `like`'s shape."""
        if isinstance(x, Tensor):
            return x if x.graph is self else self.constant(x.value)
        arr = np.asarray(x, dtype=np.float64)
        if like is not None and arr.shape != like.shape:
            arr = np.broadcast_to(arr, like.shape)
        return self.constant(arr)

    @property
    def parameters(self) -> list[Parameter]:
        return [n.parameter for n in self._bound.values()]

    # -- primitives ----------------------------------------------------------
    def build_primitive(self, kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
        if kind not in PRIMITIVES:
            raise ValueError(f"unknown primitive kind: {kind}")
        inputs = [self.coerce(t) for t in inputs]
        vals = [t.value for t in inputs]
        _check_shapes(kind, vals, attrs)
        with np.errstate(over="ignore", invalid="ignore"):
            out = _forward(kind, vals, attrs)
        return self._append(out, kind, inputs=[t.node_id for t in inputs], attrs=attrs)

    def matmul(self, a, b):
        return self.build_primitive("matmul", [a, b])

    def add(self, a, b):
        return self.build_primitive("add", [a, b])

    def multiply(self, a, b):
        return self.build_primitive("multiply", [a, b])

    def negate(self, x):
        return self.build_primitive("negate", [x])

    def exp(self, x):
        return self.build_primitive("exponent", [x])

    def log(self, x):
        return self.build_primitive("logarithm", [x])

    def sigmoid(self, x):
        return self.build_primitive("sigmoid", [x])

    def tanh(self, x):
        return self.build_primitive("tanh", [x])

    def relu(self, x):
        return self.build_primitive("relu", [x])

    def softplus(self, x):
        return self.build_primitive("softplus", [x])

    def sum(self, x, axis: Optional[int] = None, keepdims: bool = False):
        return self.build_primitive("reduce_sum", [x], axis=axis, keepdims=keepdims)

    def mean(self, x, axis: Optional[int] = None, keepdims: bool = False):
        return self.build_primitive("reduce_mean", [x], axis=axis, keepdims=keepdims)

    def broadcast(self, x, shape: Iterable[int]):
        return self.build_primitive("broadcast", [x], shape=tuple(shape))

    def concat(self, xs: Sequence, axis: int = -1):
        return self.build_primitive("concat", list(xs), axis=axis)

    def slice(self, x, start: int, stop: int, axis: int = -1):
        x = self.coerce(x)
        axis = axis % len(x.shape)
        return self.build_primitive("slice", [x], axis=axis, start=start, stop=stop)

    def gather(self, x, index):
        """Rows of x at index (repeats allowed); backward scatter-adds."""
        index = np.asarray(index, dtype=np.int64)
        return self.build_primitive("gather", [self.coerce(x)], index=index)

    def grl(self, x, alpha: float):
        return self.build_primitive("grl", [x], alpha=float(alpha))

    def clamp(self, x, lower: float):
        return self.build_primitive("clamp", [x], lower=float(lower))

    # -- compositions ---------------------------------------------------------
    def add_scalar(self, x: Tensor, c: float) -> Tensor:
        return self.add(x, self.constant(np.full(x.shape, c)))

    def scale(self, x: Tensor, c: float) -> Tensor:
        return self.multiply(x, self.constant(np.full(x.shape, c)))

    def square(self, x: Tensor) -> Tensor:
        return self.multiply(x, x)

    def logsumexp(self, x: Tensor, axis: int = -1) -> Tensor:
        """Keeps the reduced axis (size 1). The max shift is a constant node,
        which leaves the gradient exact."""
        shift = np.max(x.value, axis=axis, keepdims=True)
        shifted = self.add(x, self.negate(self.constant(np.broadcast_to(shift, x.shape))))
        lse = self.log(self.sum(self.exp(shifted), axis=axis, keepdims=True))
        return self.add(lse, self.constant(shift))

    def log_softmax(self, x: Tensor, axis: int = -1) -> Tensor:
        lse = self.logsumexp(x, axis=axis)
        return self.add(x, self.negate(self.broadcast(lse, x.shape)))


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------

def backward(graph: Graph, loss: Tensor) -> dict[str, np.ndarray]:
    """
    Populate `grad` on every node and on every Parameter bound into `graph`.
    Parameters the loss does not reach get zeros. Returns {parameter name: grad}.
    """
    if loss.graph is not graph:
        raise ValueError("loss node belongs to a different graph")
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.value)}
    for node in reversed(graph.nodes[: loss.node_id + 1]):
        g = grads.get(node.node_id)
        if g is None or node.kind in LEAF_KINDS:
            continue
        vals = [graph.nodes[i].value for i in node.inputs]
        for i, gi in zip(node.inputs, _backward(node.kind, g, vals, node.value, node.attrs)):
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = np.array(gi, dtype=np.float64)

    for node in graph.nodes:
        node.grad = grads.get(node.node_id, np.zeros_like(node.value))

    out: dict[str, np.ndarray] = {}
    for node in graph._bound.values():
        p = node.parameter
        p.grad = np.array(node.grad)
        out[p.name] = p.grad
    return out


def finite_diff_grad(fn: Callable[[np.ndarray], float], point: np.ndarray,
                     step: float = 1e-6) -> np.ndarray:
    """Central differences, one coordinate at a time."""
    if step <= 0:
        raise ValueError(f"step must be > 0, got {step}")
    x = np.array(point, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(fn(x))
        flat[i] = orig - step
        lo = float(fn(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def activate(graph: Graph, x: Tensor, activation: Optional[str]) -> Tensor:
    if activation in (None, "identity"):
        return x
    if activation == "sigmoid":
        return graph.sigmoid(x)
    if activation == "tanh":
        return graph.tanh(x)
    if activation == "relu":
        return graph.relu(x)
    if activation == "softplus":
        return graph.softplus(x)
    raise ValueError(f"unknown activation: {activation}")


def dense(graph: Graph, x, weights, bias, activation: Optional[str] = None) -> Tensor:
    """activation(x @ W + b). `x` is (in,) or (batch, in)."""
    x, w, b = graph.coerce(x), graph.coerce(weights), graph.coerce(bias)
    if len(w.shape) != 2 or len(b.shape) != 1 or b.shape[0] != w.shape[1]:
        raise ShapeError(f"dense: weights {w.shape} and bias {b.shape} disagree")
    h = graph.matmul(x, w)
    h = graph.add(h, graph.broadcast(b, h.shape))
    return activate(graph, h, activation)


def glorot_uniform(rng, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform((fan_in, fan_out), low=-limit, high=limit)


class DenseLayer:
    def __init__(self, name: str, in_dim: int, out_dim: int, rng,
                 activation: Optional[str] = None, zero_init: bool = False):
        if activation not in (None,) + ACTIVATIONS:
            raise ValueError(f"unknown activation: {activation}")
        w = np.zeros((in_dim, out_dim)) if zero_init else glorot_uniform(rng, in_dim, out_dim)
        self.weights = Parameter(f"{name}.weights", w)
        self.bias = Parameter(f"{name}.bias", np.zeros(out_dim))
        self.activation = activation
        self.in_dim, self.out_dim = in_dim, out_dim

    def parameters(self) -> list[Parameter]:
        return [self.weights, self.bias]

    def __call__(self, graph: Graph, x) -> Tensor:
        return dense(graph, x, graph.param(self.weights), graph.param(self.bias), self.activation)


class DenseStack:
    """Hidden layers share one activation; the last layer has its own
    (identity by default)."""

    def __init__(self, name: str, widths: Sequence[int], rng, activation: str = "tanh",
                 out_activation: Optional[str] = None, zero_init_last: bool = False):
        if len(widths) < 2:
            raise ValueError(f"{name}: need at least input and output width, got {list(widths)}")
        self.layers: list[DenseLayer] = []
        last = len(widths) - 2
        for k, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            self.layers.append(DenseLayer(
                f"{name}.{k}", a, b, rng,
                activation=out_activation if k == last else activation,
                zero_init=zero_init_last and k == last,
            ))
        self.in_dim, self.out_dim = widths[0], widths[-1]

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def __call__(self, graph: Graph, x) -> Tensor:
        for layer in self.layers:
            x = layer(graph, x)
        return x
