"""Reverse-mode differentiation over explicit numpy graphs.

A graph is built once from symbolic :class:`Node` objects and evaluated many
times. Each evaluation owns a :class:`Workspace` holding the activations, so a
single :class:`Graph` can be shared between threads.

Example::

    a = leaf("a")
    g = Graph(square(a))
    ws = g.workspace()
    ws.forward({"a": np.array(3.0)})   # -> 9.0
    ws.backward()["a"]                  # -> 6.0
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.linalg import cho_solve

LOG_2PI = math.log(2.0 * math.pi)


class GraphError(RuntimeError):
    """Raised for malformed graphs or invalid evaluation order."""


class ShapeError(GraphError):
    """Shape mismatch, carrying the label of the offending node."""

    def __init__(self, node: "Node", message: str):
        super().__init__(f"node {node.label}: {message}")
        self.node = node


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


@dataclass(frozen=True)
class Primitive:
    """A differentiable operation.

    ``vjp(g, out, *inputs, **attrs)`` returns one cotangent per input.
    """

    name: str
    fwd: Callable
    vjp: Callable


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def _lse(x, axis, keepdims):
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


def _keep(g, axis, keepdims):
    return g if keepdims or axis is None else np.expand_dims(g, axis)


def _sum_vjp(g, out, x, axis=None, keepdims=False):
    if axis is None:
        return (np.broadcast_to(g, x.shape).copy(),)
    return (np.broadcast_to(_keep(g, axis, keepdims), x.shape).copy(),)


def _mean_vjp(g, out, x, axis=None, keepdims=False):
    n = x.size if axis is None else x.shape[axis]
    return (_sum_vjp(g, out, x, axis, keepdims)[0] / n,)


def _lse_vjp(g, out, x, axis, keepdims=False):
    o = _keep(out, axis, keepdims)
    return (_keep(g, axis, keepdims) * np.exp(x - o),)


def _softmax(x, axis):
    return np.exp(x - _lse(x, axis, True))


def _softmax_vjp(g, out, x, axis):
    return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)


def _log_softmax_vjp(g, out, x, axis):
    return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)


def _matmul_vjp(g, out, a, b):
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs ndim >= 2, got {a.shape} @ {b.shape}")
    return a @ b


def _affine_fwd(x, w, b):
    return _matmul_fwd(x, w) + b


def _affine_vjp(g, out, x, w, b):
    gx, gw = _matmul_vjp(g, out, x, w)
    return gx, gw, _unbroadcast(g, b.shape)


def _diag_gauss_fwd(x, mean, std):
    z = (x - mean) / std
    return np.sum(-0.5 * z * z - np.log(std), axis=-1) - 0.5 * LOG_2PI * z.shape[-1]


def _diag_gauss_vjp(g, out, x, mean, std):
    z = (x - mean) / std
    ge = g[..., None]
    gx = -ge * z / std
    gstd = ge * (z * z - 1.0) / std
    return (
        _unbroadcast(gx, x.shape),
        _unbroadcast(-gx, mean.shape),
        _unbroadcast(gstd, std.shape),
    )


def _mvn_fwd(f, mean, chol):
    d = f - mean
    m = d.shape[-1]
    flat = d.reshape(-1, m)
    alpha = cho_solve((chol, True), flat.T).T
    quad = np.sum(flat * alpha, axis=-1).reshape(d.shape[:-1])
    half_logdet = np.sum(np.log(np.diag(chol)))
    return -0.5 * quad - half_logdet - 0.5 * m * LOG_2PI


def _mvn_vjp(g, out, f, mean, chol):
    d = np.broadcast_to(f - mean, np.broadcast_shapes(f.shape, mean.shape))
    m = d.shape[-1]
    alpha = cho_solve((chol, True), d.reshape(-1, m).T).T.reshape(d.shape)
    gf = -np.asarray(g)[..., None] * alpha
    return _unbroadcast(gf, f.shape), _unbroadcast(-gf, mean.shape), None


def _getitem_vjp(g, out, x, index):
    gx = np.zeros_like(x)
    gx[index] += g
    return (gx,)


def _concat_vjp(g, out, *xs, axis):
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


PRIMITIVES: dict[str, Primitive] = {}


def _register(name, fwd, vjp):
    PRIMITIVES[name] = Primitive(name, fwd, vjp)


_register("add", np.add, lambda g, o, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
_register("sub", np.subtract, lambda g, o, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
_register(
    "mul", np.multiply, lambda g, o, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))
)
_register(
    "div",
    np.divide,
    lambda g, o, a, b: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * o / b, b.shape)),
)
_register("neg", np.negative, lambda g, o, x: (-g,))
_register("square", np.square, lambda g, o, x: (2.0 * g * x,))
_register("exp", np.exp, lambda g, o, x: (g * o,))
_register("log", np.log, lambda g, o, x: (g / x,))
_register("tanh", np.tanh, lambda g, o, x: (g * (1.0 - o * o),))
_register("relu", lambda x: np.maximum(x, 0.0), lambda g, o, x: (g * (x > 0),))
_register("softplus", _softplus, lambda g, o, x: (g * _sigmoid(x),))
_register("sigmoid", _sigmoid, lambda g, o, x: (g * o * (1.0 - o),))
_register("matmul", _matmul_fwd, _matmul_vjp)
_register("affine", _affine_fwd, _affine_vjp)
_register("sum", lambda x, axis=None, keepdims=False: np.sum(x, axis=axis, keepdims=keepdims), _sum_vjp)
_register("mean", lambda x, axis=None, keepdims=False: np.mean(x, axis=axis, keepdims=keepdims), _mean_vjp)
_register("logsumexp", lambda x, axis, keepdims=False: _lse(x, axis, keepdims), _lse_vjp)
_register("softmax", _softmax, _softmax_vjp)
_register("log_softmax", lambda x, axis: x - _lse(x, axis, True), _log_softmax_vjp)
_register("reshape", lambda x, shape: np.reshape(x, shape), lambda g, o, x, shape: (g.reshape(x.shape),))
_register(
    "split_last",
    lambda x, shape: np.reshape(x, x.shape[:-1] + tuple(shape)),
    lambda g, o, x, shape: (g.reshape(x.shape),),
)
_register("getitem", lambda x, index: x[index], _getitem_vjp)
_register("concat", lambda *xs, axis: np.concatenate(xs, axis=axis), _concat_vjp)
_register(
    "reparam",
    lambda m, s, e: m + s * e,
    lambda g, o, m, s, e: (
        _unbroadcast(g, m.shape),
        _unbroadcast(g * e, s.shape),
        _unbroadcast(g * s, e.shape),
    ),
)
_register("diag_gaussian_logpdf", _diag_gauss_fwd, _diag_gauss_vjp)
_register("mvn_logpdf", _mvn_fwd, _mvn_vjp)


# ---------------------------------------------------------------------------
# symbolic nodes
# ---------------------------------------------------------------------------

_ids = itertools.count()


class Node:
    """Symbolic value in a graph: a leaf, a constant, or a primitive application."""

    __slots__ = ("op", "inputs", "attrs", "name", "id", "value", "differentiable", "shape")

    def __init__(self, op, inputs=(), attrs=None, name=None, value=None,
                 differentiable=False, shape=None):
        self.op = op
        self.inputs = tuple(inputs)
        self.attrs = attrs or {}
        self.name = name
        self.id = next(_ids)
        self.value = value
        self.differentiable = differentiable
        self.shape = shape

    @property
    def label(self) -> str:
        if self.name:
            return f"{self.op}:{self.name}"
        return f"{self.op}#{self.id}"

    def __repr__(self):
        return f"Node({self.label})"

    def __add__(self, other):
        return apply("add", self, other)

    def __radd__(self, other):
        return apply("add", other, self)

    def __sub__(self, other):
        return apply("sub", self, other)

    def __rsub__(self, other):
        return apply("sub", other, self)

    def __mul__(self, other):
        return apply("mul", self, other)

    def __rmul__(self, other):
        return apply("mul", other, self)

    def __truediv__(self, other):
        return apply("div", self, other)

    def __rtruediv__(self, other):
        return apply("div", other, self)

    def __neg__(self):
        return apply("neg", self)

    def __matmul__(self, other):
        return apply("matmul", self, other)

    def __getitem__(self, index):
        return apply("getitem", self, index=index)


def leaf(name: str, differentiable: bool = True, shape: Sequence[int | None] | None = None) -> Node:
    """Named graph input. Gradients are returned for differentiable leaves only.

    ``shape`` may contain ``None`` for free dimensions; it is checked at
    evaluation time.
    """
    return Node("leaf", name=name, differentiable=differentiable,
                shape=None if shape is None else tuple(shape))


def const(value) -> Node:
    return Node("const", value=np.asarray(value, dtype=np.float64))


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def apply(op: str, *inputs, **attrs) -> Node:
    if op not in PRIMITIVES:
        raise GraphError(f"unknown primitive {op!r}")
    return Node(op, [_as_node(x) for x in inputs], attrs)


def add(a, b): return apply("add", a, b)
def sub(a, b): return apply("sub", a, b)
def mul(a, b): return apply("mul", a, b)
def div(a, b): return apply("div", a, b)
def neg(x): return apply("neg", x)
def square(x): return apply("square", x)
def exp(x): return apply("exp", x)
def log(x): return apply("log", x)
def tanh(x): return apply("tanh", x)
def relu(x): return apply("relu", x)
def softplus(x): return apply("softplus", x)
def sigmoid(x): return apply("sigmoid", x)
def matmul(a, b): return apply("matmul", a, b)
def affine(x, w, b): return apply("affine", x, w, b)
def reshape(x, shape): return apply("reshape", x, shape=tuple(shape))
def split_last(x, shape):
    """Reshape the trailing axis into ``shape``, keeping leading axes free."""
    return apply("split_last", x, shape=tuple(shape))


def concat(xs, axis=-1): return apply("concat", *xs, axis=axis)
def softmax(x, axis=-1): return apply("softmax", x, axis=axis)
def log_softmax(x, axis=-1): return apply("log_softmax", x, axis=axis)


def sum(x, axis=None, keepdims=False):  # noqa: A001
    return apply("sum", x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    return apply("mean", x, axis=axis, keepdims=keepdims)


def logsumexp(x, axis=-1, keepdims=False):
    return apply("logsumexp", x, axis=axis, keepdims=keepdims)


def reparam(mean_, std, eps):
    """Pathwise sample ``mean + std * eps``; feed ``eps`` as a non-differentiable leaf."""
    return apply("reparam", mean_, std, eps)


def diag_gaussian_logpdf(x, mean_, std):
    """Log-density of a diagonal Gaussian, summed over the last axis."""
    return apply("diag_gaussian_logpdf", x, mean_, std)


def mvn_logpdf(f, mean_, chol):
    """Multivariate normal log-density over the last axis of ``f``.

    ``chol`` is the lower Cholesky factor of the covariance (an array or a
    non-differentiable leaf); no gradient flows into it.
    """
    return apply("mvn_logpdf", f, mean_, chol)


# ---------------------------------------------------------------------------
# graphs and evaluation
# ---------------------------------------------------------------------------


class Graph:
    """Immutable, topologically ordered view of the nodes reaching ``outputs``."""

    def __init__(self, outputs: Node | Sequence[Node]):
        self.single = isinstance(outputs, Node)
        self.outputs: tuple[Node, ...] = (outputs,) if self.single else tuple(outputs)
        order: list[Node] = []
        seen: set[int] = set()
        stack = [(n, False) for n in reversed(self.outputs)]
        while stack:
            node, expanded = stack.pop()
            if node.id in seen:
                continue
            if expanded:
                seen.add(node.id)
                order.append(node)
                continue
            stack.append((node, True))
            for child in reversed(node.inputs):
                if child.id not in seen:
                    stack.append((child, False))
        self.order: tuple[Node, ...] = tuple(order)
        self.leaves: dict[str, Node] = {}
        for node in self.order:
            if node.op == "leaf":
                if node.name in self.leaves and self.leaves[node.name] is not node:
                    raise GraphError(f"duplicate leaf name {node.name!r}")
                self.leaves[node.name] = node

    @property
    def output(self) -> Node:
        return self.outputs[0]

    def workspace(self) -> "Workspace":
        return Workspace(self)

    def forward(self, inputs: Mapping[str, np.ndarray]):
        return self.workspace().forward(inputs)

    def value_and_grad(self, inputs: Mapping[str, np.ndarray], seed=1.0):
        ws = self.workspace()
        value = ws.forward(inputs)
        return value, ws.backward(seed)


class Workspace:
    """Activation storage for one forward/backward evaluation of a graph."""

    def __init__(self, graph: Graph):
        self.graph = graph
        self.values: dict[int, np.ndarray] | None = None

    def forward(self, inputs: Mapping[str, np.ndarray]):
        g = self.graph
        missing = set(g.leaves) - set(inputs)
        if missing:
            raise GraphError(f"missing inputs: {sorted(missing)}")
        values: dict[int, np.ndarray] = {}
        for node in g.order:
            if node.op == "leaf":
                v = np.asarray(inputs[node.name], dtype=np.float64)
                if node.shape is not None and (
                    v.ndim != len(node.shape)
                    or any(s is not None and s != d for s, d in zip(node.shape, v.shape))
                ):
                    raise ShapeError(node, f"expected shape {node.shape}, got {v.shape}")
                values[node.id] = v
            elif node.op == "const":
                values[node.id] = node.value
            else:
                args = [values[c.id] for c in node.inputs]
                try:
                    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
                        values[node.id] = np.asarray(PRIMITIVES[node.op].fwd(*args, **node.attrs))
                except ValueError as exc:
                    shapes = [a.shape for a in args]
                    raise ShapeError(node, f"{exc} (input shapes {shapes})") from exc
        self.values = values
        outs = tuple(values[o.id] for o in g.outputs)
        return outs[0] if g.single else outs

    def __getitem__(self, node: Node) -> np.ndarray:
        if self.values is None:
            raise GraphError("forward has not been evaluated")
        return self.values[node.id]

    def backward(self, seed=1.0, seeds: Mapping[Node, np.ndarray] | None = None) -> dict[str, np.ndarray]:
        """Gradients of ``sum(seed * output)`` for every differentiable leaf.

        ``seeds`` adds extra cotangents on arbitrary intermediate nodes, which
        turns the call into a general vector-Jacobian product.
        """
        if self.values is None:
            raise GraphError("backward called before forward")
        g = self.graph
        out = self.values[g.output.id]
        if seeds is None and np.ndim(seed) == 0 and out.ndim != 0:
            raise GraphError(f"backward needs a scalar output, got shape {out.shape}")
        grads: dict[int, np.ndarray] = {g.output.id: np.broadcast_to(np.asarray(seed, float), out.shape).copy()}
        for node, s in (seeds or {}).items():
            v = self.values[node.id]
            s = np.broadcast_to(np.asarray(s, float), v.shape)
            grads[node.id] = grads[node.id] + s if node.id in grads else s.copy()
        needed = self._needs_grad()
        for node in reversed(g.order):
            if node.op in ("leaf", "const") or node.id not in grads:
                continue
            gout = grads.pop(node.id)
            args = [self.values[c.id] for c in node.inputs]
            cot = PRIMITIVES[node.op].vjp(gout, self.values[node.id], *args, **node.attrs)
            for child, c in zip(node.inputs, cot):
                if c is None or child.id not in needed:
                    continue
                if child.id in grads:
                    grads[child.id] = grads[child.id] + c
                else:
                    grads[child.id] = c
        result = {}
        for name, node in g.leaves.items():
            if node.differentiable:
                v = self.values[node.id]
                result[name] = grads.get(node.id, np.zeros_like(v))
        return result

    def _needs_grad(self) -> set[int]:
        needed: set[int] = set()
        for node in self.graph.order:
            if (node.op == "leaf" and node.differentiable) or any(c.id in needed for c in node.inputs):
                needed.add(node.id)
        return needed


def forward(graph: Graph, inputs: Mapping[str, np.ndarray]):
    """Evaluate ``graph`` on ``inputs`` in a fresh workspace and return the output value."""
    return graph.forward(inputs)


def backward(workspace: Workspace, output_seed=1.0) -> dict[str, np.ndarray]:
    return workspace.backward(output_seed)


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


@dataclass
class GradientReport:
    max_rel_error: dict[str, float]
    tol: float
    checked: dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tol

    def __str__(self):
        lines = [f"{'PASS' if self.passed else 'FAIL'} (tol {self.tol:g})"]
        for k, v in self.max_rel_error.items():
            lines.append(f"  {k}: max rel err {v:.3e} over {self.checked.get(k, 0)} entries")
        return "\n".join(lines)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise ``|a-b| / max(|a|, |b|, floor)``."""
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_gradient(graph: Graph, inputs: Mapping[str, np.ndarray], name: str,
                     h: float = 1e-5, indices: Iterable[int] | None = None) -> np.ndarray:
    """Central finite differences of a scalar graph w.r.t. leaf ``name``."""
    base = {k: np.array(v, dtype=np.float64, copy=True) for k, v in inputs.items()}
    x = base[name]
    flat = x.reshape(-1)
    grad = np.full(flat.shape, np.nan)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = float(graph.forward(base))
        flat[i] = old - h
        fm = float(graph.forward(base))
        flat[i] = old
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def check_gradients(graph: Graph, inputs: Mapping[str, np.ndarray], tol: float = 1e-4,
                    h: float = 1e-5, max_entries: int | None = 200, floor: float = 1e-6,
                    seed: int = 0, vjp: Callable | None = None) -> GradientReport:
    """Compare backward gradients with central differences for every differentiable leaf.

    Large leaves are subsampled to ``max_entries`` coordinates. ``vjp`` can
    override the analytic gradient (used for negative controls).
    """
    if vjp is None:
        _, analytic = graph.value_and_grad(inputs)
    else:
        analytic = vjp(inputs)
    rng = np.random.default_rng(seed)
    errors, counts = {}, {}
    for name, a in analytic.items():
        size = np.size(a)
        if max_entries is not None and size > max_entries:
            idx = np.sort(rng.choice(size, max_entries, replace=False))
        else:
            idx = np.arange(size)
        num = numeric_gradient(graph, inputs, name, h=h, indices=idx).reshape(-1)[idx]
        errors[name] = float(np.max(relative_error(np.reshape(a, -1)[idx], num, floor), initial=0.0))
        counts[name] = len(idx)
    return GradientReport(errors, tol, counts)


class Adam:
    """Adaptive-moment gradient descent over a dict of parameter arrays."""

    def __init__(self, params: Mapping[str, np.ndarray], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        """Descend: updates ``params`` in place along ``-grads``."""
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
