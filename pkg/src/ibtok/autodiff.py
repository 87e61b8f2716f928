"""Static-graph reverse-mode differentiation over a closed set of primitives.

A :class:`Graph` is built once with the builder methods (``g.matmul(a, b)``,
``g.logsumexp(x, axis=1)``, ...) which return integer node handles.  The graph
is then evaluated with :func:`forward` on concrete input tensors and
differentiated with :func:`backward`.  Everything is float64.

Shape rules
-----------
add / mul
    Operands have equal shapes, or one of them is a scalar ``()``, or one is a
    vector ``(n,)`` and the other a matrix ``(m, n)`` (row broadcast).  Nothing
    more general is supported.
matmul
    ``(m, k) @ (k, n) -> (m, n)``.
exp / log / act
    Elementwise, shape preserved.  ``act`` kinds: ``tanh``, ``clip``.
sum / mean / logsumexp
    Reduce over ``axis`` (``None`` for all entries), the axis is dropped.
cosine
    ``(K, d), (M, d) -> (K, M)`` matrix of pairwise cosine similarities.
xent
    ``(K, C)`` logits and ``(K,)`` integer labels -> ``(K,)`` per-row
    negative log-softmax probability of the label.
sqerr
    ``(..., d), (..., d) -> (...)`` squared Euclidean distance over the last
    axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

PRIMITIVES = (
    "add",
    "mul",
    "matmul",
    "exp",
    "log",
    "logsumexp",
    "mean",
    "sum",
    "act",
    "cosine",
    "xent",
    "sqerr",
)
LEAVES = ("input", "const")
ACTIVATIONS = ("tanh", "clip")


class GraphError(ValueError):
    """Raised for malformed graphs, shape mismatches and misuse of the API."""


class NonFiniteError(FloatingPointError):
    """A node produced a non-finite value during forward evaluation."""

    def __init__(self, node: int, op: str, name: str = ""):
        self.node = node
        self.op = op
        label = f" ({name})" if name else ""
        super().__init__(f"non-finite output at node {node} [{op}]{label}")


class Tensor:
    """Row-major float64 array with an optional gradient slot."""

    __slots__ = ("shape", "data", "grad")

    def __init__(self, shape: Sequence[int], data, grad=None):
        self.shape = tuple(int(s) for s in shape)
        if any(s < 1 for s in self.shape):
            raise GraphError(f"shape entries must be positive, got {self.shape}")
        self.data = np.ascontiguousarray(data, dtype=np.float64).reshape(-1)
        if self.data.size != _size(self.shape):
            raise GraphError(
                f"data length {self.data.size} does not match shape {self.shape}"
            )
        if grad is not None:
            grad = np.ascontiguousarray(grad, dtype=np.float64).reshape(-1)
            if grad.size != self.data.size:
                raise GraphError("grad length differs from data length")
        self.grad = grad

    @classmethod
    def from_array(cls, value) -> "Tensor":
        arr = np.asarray(value, dtype=np.float64)
        return cls(arr.shape, arr)

    @property
    def value(self) -> np.ndarray:
        return self.data.reshape(self.shape)

    @property
    def grad_value(self) -> np.ndarray | None:
        return None if self.grad is None else self.grad.reshape(self.shape)

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() on tensor of shape {self.shape}")
        return float(self.data[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={self.value!r})"


def _size(shape: tuple[int, ...]) -> int:
    n = 1
    for s in shape:
        n *= s
    return n


@dataclass
class Node:
    op: str
    parents: tuple[int, ...]
    shape: tuple[int, ...]
    attrs: dict = field(default_factory=dict)
    name: str = ""


class Graph:
    """Append-only DAG of primitive nodes.

    Parents always precede children, so node order is a valid evaluation
    order.  The most recent forward pass is cached on the instance and
    consumed by :func:`backward`; one instance must not be evaluated from
    several threads at once.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.inputs: list[int] = []
        self._values: list[np.ndarray] | None = None
        self._bound: list[Tensor] | None = None

    def __len__(self) -> int:
        return len(self.nodes)

    # -- leaves ---------------------------------------------------------
    def input(self, shape: Sequence[int], name: str = "", differentiable: bool = True) -> int:
        shape = tuple(int(s) for s in shape)
        idx = self._push(Node("input", (), shape, {"differentiable": differentiable}, name))
        self.inputs.append(idx)
        return idx

    def const(self, value, name: str = "") -> int:
        arr = np.array(value, dtype=np.float64)
        arr.setflags(write=False)
        return self._push(Node("const", (), arr.shape, {"value": arr}, name))

    # -- primitives -----------------------------------------------------
    def add(self, a: int, b: int, name: str = "") -> int:
        return self._push(Node("add", (a, b), self._bshape(a, b, "add"), {}, name))

    def mul(self, a: int, b: int, name: str = "") -> int:
        return self._push(Node("mul", (a, b), self._bshape(a, b, "mul"), {}, name))

    def matmul(self, a: int, b: int, name: str = "") -> int:
        sa, sb = self.shape(a), self.shape(b)
        if len(sa) != 2 or len(sb) != 2 or sa[1] != sb[0]:
            raise GraphError(f"matmul shape mismatch {sa} @ {sb} at node {len(self.nodes)}")
        return self._push(Node("matmul", (a, b), (sa[0], sb[1]), {}, name))

    def exp(self, a: int, name: str = "") -> int:
        return self._push(Node("exp", (a,), self.shape(a), {}, name))

    def log(self, a: int, name: str = "") -> int:
        return self._push(Node("log", (a,), self.shape(a), {}, name))

    def act(self, a: int, kind: str, lo: float = -1.0, hi: float = 1.0, name: str = "") -> int:
        if kind not in ACTIVATIONS:
            raise GraphError(f"unknown activation {kind!r}")
        attrs = {"kind": kind}
        if kind == "clip":
            if not lo < hi:
                raise GraphError("clip requires lo < hi")
            attrs.update(lo=float(lo), hi=float(hi))
        return self._push(Node("act", (a,), self.shape(a), attrs, name))

    def sum(self, a: int, axis: int | None = None, name: str = "") -> int:
        return self._reduce("sum", a, axis, name)

    def mean(self, a: int, axis: int | None = None, name: str = "") -> int:
        return self._reduce("mean", a, axis, name)

    def logsumexp(self, a: int, axis: int | None = None, name: str = "") -> int:
        return self._reduce("logsumexp", a, axis, name)

    def cosine(self, a: int, b: int, name: str = "") -> int:
        sa, sb = self.shape(a), self.shape(b)
        if len(sa) != 2 or len(sb) != 2 or sa[1] != sb[1]:
            raise GraphError(f"cosine shape mismatch {sa} vs {sb} at node {len(self.nodes)}")
        return self._push(Node("cosine", (a, b), (sa[0], sb[0]), {}, name))

    def xent(self, logits: int, labels: int, name: str = "") -> int:
        sl, sy = self.shape(logits), self.shape(labels)
        if len(sl) != 2 or sy != (sl[0],):
            raise GraphError(f"xent shape mismatch logits {sl} labels {sy} at node {len(self.nodes)}")
        return self._push(Node("xent", (logits, labels), (sl[0],), {}, name))

    def sqerr(self, a: int, b: int, name: str = "") -> int:
        sa, sb = self.shape(a), self.shape(b)
        if sa != sb or len(sa) == 0:
            raise GraphError(f"sqerr shape mismatch {sa} vs {sb} at node {len(self.nodes)}")
        return self._push(Node("sqerr", (a, b), sa[:-1], {}, name))

    # -- composites (built from primitives only) ------------------------
    def scale(self, a: int, c: float, name: str = "") -> int:
        return self.mul(a, self.const(float(c)), name)

    def sub(self, a: int, b: int, name: str = "") -> int:
        return self.add(a, self.scale(b, -1.0), name)

    def shift(self, a: int, c: float, name: str = "") -> int:
        return self.add(a, self.const(float(c)), name)

    # -- helpers --------------------------------------------------------
    def shape(self, idx: int) -> tuple[int, ...]:
        if not 0 <= idx < len(self.nodes):
            raise GraphError(f"unknown node {idx}")
        return self.nodes[idx].shape

    def find(self, name: str) -> int:
        for i, node in enumerate(self.nodes):
            if node.name == name:
                return i
        raise KeyError(name)

    def _push(self, node: Node) -> int:
        for p in node.parents:
            if not 0 <= p < len(self.nodes):
                raise GraphError(f"parent {p} does not exist")
        self.nodes.append(node)
        self._values = None
        return len(self.nodes) - 1

    def _reduce(self, op: str, a: int, axis: int | None, name: str) -> int:
        sa = self.shape(a)
        if axis is None:
            out = ()
        else:
            if not -len(sa) <= axis < len(sa):
                raise GraphError(f"{op} axis {axis} out of range for shape {sa}")
            axis = axis % len(sa)
            out = sa[:axis] + sa[axis + 1:]
        return self._push(Node(op, (a,), out, {"axis": axis}, name))

    def _bshape(self, a: int, b: int, op: str) -> tuple[int, ...]:
        sa, sb = self.shape(a), self.shape(b)
        if sa == sb:
            return sa
        if sb == ():
            return sa
        if sa == ():
            return sb
        if len(sa) == 2 and sb == (sa[1],):
            return sa
        if len(sb) == 2 and sa == (sb[1],):
            return sb
        raise GraphError(f"{op} shape mismatch {sa} vs {sb} at node {len(self.nodes)}")


# ----------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    return g.sum(axis=0)


def _expand(g: np.ndarray, shape: tuple[int, ...], axis: int | None) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def _lse(x: np.ndarray, axis: int | None) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return out.reshape(()) if axis is None else np.squeeze(out, axis=axis)


def _labels(y: np.ndarray, n_classes: int, node: int) -> np.ndarray:
    idx = y.astype(np.int64)
    if np.any(idx != y) or np.any(idx < 0) or np.any(idx >= n_classes):
        raise GraphError(f"class labels out of range [0, {n_classes}) at node {node}")
    return idx


def _rownorm(x: np.ndarray, node: int) -> np.ndarray:
    n = np.sqrt(np.sum(x * x, axis=1))
    if np.any(n == 0.0):
        raise GraphError(f"cosine similarity of a zero-norm row at node {node}")
    return n


def _eval(node: Node, idx: int, vals: list[np.ndarray]) -> np.ndarray:
    op = node.op
    p = [vals[i] for i in node.parents]
    if op == "add":
        return p[0] + p[1]
    if op == "mul":
        return p[0] * p[1]
    if op == "matmul":
        return p[0] @ p[1]
    if op == "exp":
        return np.exp(p[0])
    if op == "log":
        return np.log(p[0])
    if op == "act":
        if node.attrs["kind"] == "tanh":
            return np.tanh(p[0])
        return np.clip(p[0], node.attrs["lo"], node.attrs["hi"])
    if op == "sum":
        return np.asarray(np.sum(p[0], axis=node.attrs["axis"]))
    if op == "mean":
        return np.asarray(np.mean(p[0], axis=node.attrs["axis"]))
    if op == "logsumexp":
        return np.asarray(_lse(p[0], node.attrs["axis"]))
    if op == "cosine":
        a, b = p
        return (a / _rownorm(a, idx)[:, None]) @ (b / _rownorm(b, idx)[:, None]).T
    if op == "xent":
        logits, y = p
        k = _labels(y, logits.shape[1], idx)
        return _lse(logits, 1) - logits[np.arange(logits.shape[0]), k]
    if op == "sqerr":
        d = p[0] - p[1]
        return np.asarray(np.sum(d * d, axis=-1))
    raise GraphError(f"unknown op {op!r} at node {idx}")


def forward(graph: Graph, inputs: Sequence[Tensor]) -> list[Tensor]:
    """Evaluate every node of ``graph`` and return their outputs in order.

    Raises:
        GraphError: wrong number of inputs or an input with the wrong shape.
        NonFiniteError: some node produced ``inf`` or ``nan``.
    """
    if len(inputs) != len(graph.inputs):
        raise GraphError(f"graph expects {len(graph.inputs)} inputs, got {len(inputs)}")
    bound = {}
    for t, idx in zip(inputs, graph.inputs):
        if t.shape != graph.nodes[idx].shape:
            raise GraphError(
                f"input node {idx} ({graph.nodes[idx].name or 'unnamed'}) expects shape "
                f"{graph.nodes[idx].shape}, got {t.shape}"
            )
        bound[idx] = t.value
    vals: list[np.ndarray] = []
    with np.errstate(all="ignore"):
        for i, node in enumerate(graph.nodes):
            if node.op == "input":
                v = bound[i]
            elif node.op == "const":
                v = node.attrs["value"]
            else:
                v = _eval(node, i, vals)
            if not np.all(np.isfinite(v)):
                raise NonFiniteError(i, node.op, node.name)
            vals.append(v)
    graph._values = vals
    graph._bound = list(inputs)
    return [Tensor(v.shape, v) for v in vals]


def _vjp(node: Node, g: np.ndarray, vals: list[np.ndarray], out: np.ndarray) -> list[np.ndarray | None]:
    op = node.op
    p = [vals[i] for i in node.parents]
    if op == "add":
        return [_unbroadcast(g, p[0].shape), _unbroadcast(g, p[1].shape)]
    if op == "mul":
        return [_unbroadcast(g * p[1], p[0].shape), _unbroadcast(g * p[0], p[1].shape)]
    if op == "matmul":
        return [g @ p[1].T, p[0].T @ g]
    if op == "exp":
        return [g * out]
    if op == "log":
        return [g / p[0]]
    if op == "act":
        if node.attrs["kind"] == "tanh":
            return [g * (1.0 - out * out)]
        inside = (p[0] > node.attrs["lo"]) & (p[0] < node.attrs["hi"])
        return [g * inside]
    axis = node.attrs.get("axis")
    if op == "sum":
        return [_expand(g, p[0].shape, axis)]
    if op == "mean":
        n = p[0].size if axis is None else p[0].shape[axis]
        return [_expand(g, p[0].shape, axis) / n]
    if op == "logsumexp":
        soft = np.exp(p[0] - _expand(out, p[0].shape, axis))
        return [_expand(g, p[0].shape, axis) * soft]
    if op == "cosine":
        a, b = p
        na, nb = np.sqrt(np.sum(a * a, axis=1)), np.sqrt(np.sum(b * b, axis=1))
        ah, bh = a / na[:, None], b / nb[:, None]
        ga = (g @ bh - np.sum(g * out, axis=1)[:, None] * ah) / na[:, None]
        gb = (g.T @ ah - np.sum(g * out, axis=0)[:, None] * bh) / nb[:, None]
        return [ga, gb]
    if op == "xent":
        logits, y = p
        soft = np.exp(logits - _lse(logits, 1)[:, None])
        soft[np.arange(logits.shape[0]), y.astype(np.int64)] -= 1.0
        return [g[:, None] * soft, None]
    if op == "sqerr":
        d = 2.0 * (p[0] - p[1]) * g[..., None]
        return [d, -d]
    raise GraphError(f"unknown op {op!r}")


def backward(graph: Graph, output: int, seed: Tensor | None = None) -> list[Tensor]:
    """Reverse-accumulate ``d(seed . output)/d(input)`` for every graph input.

    The gradients are written into the ``grad`` slot of the tensors passed to
    the last :func:`forward` call and also returned, one per graph input.
    ``seed`` defaults to ones (the natural choice for scalar outputs).
    """
    if graph._values is None or graph._bound is None:
        raise GraphError("backward called before forward")
    vals = graph._values
    if not 0 <= output < len(graph.nodes):
        raise GraphError(f"unknown output node {output}")
    out_shape = graph.nodes[output].shape
    if seed is None:
        seed_arr = np.ones(out_shape)
    else:
        if seed.shape != out_shape:
            raise GraphError(f"seed shape {seed.shape} does not match output shape {out_shape}")
        seed_arr = seed.value
    adj: list[np.ndarray | None] = [None] * (output + 1)
    adj[output] = np.array(seed_arr, dtype=np.float64)
    for i in range(output, -1, -1):
        g = adj[i]
        node = graph.nodes[i]
        if g is None or node.op in LEAVES:
            continue
        for parent, gp in zip(node.parents, _vjp(node, g, vals, vals[i])):
            if gp is None:
                continue
            adj[parent] = gp if adj[parent] is None else adj[parent] + gp
    grads = []
    for t, idx in zip(graph._bound, graph.inputs):
        g = adj[idx] if idx <= output and adj[idx] is not None else np.zeros(t.shape)
        t.grad = np.array(g, dtype=np.float64).reshape(-1)
        grads.append(Tensor(t.shape, t.grad))
    return grads


# ----------------------------------------------------------------------
# finite-difference verification
# ----------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    input_index: int
    coordinate: int
    analytic: float
    numeric: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    graph: Graph,
    point: Sequence[Tensor],
    eps: float = 1e-5,
    tolerance: float = 1e-5,
    output: int | None = None,
    wrt: Sequence[int] | None = None,
) -> GradCheckReport:
    """Compare :func:`backward` against central finite differences.

    ``output`` defaults to the last node and must be scalar.  ``wrt`` lists
    positions in ``graph.inputs`` to perturb; by default every input declared
    differentiable.  Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not 0 < eps <= 1e-2:
        raise GraphError("eps must lie in (0, 1e-2]")
    output = len(graph.nodes) - 1 if output is None else output
    if _size(graph.nodes[output].shape) != 1:
        raise GraphError(f"grad_check needs a scalar output, node {output} has shape "
                         f"{graph.nodes[output].shape}")
    if wrt is None:
        wrt = [k for k, idx in enumerate(graph.inputs)
               if graph.nodes[idx].attrs.get("differentiable", True)]
    point = [Tensor(t.shape, t.data.copy()) for t in point]

    def f() -> float:
        return float(forward(graph, point)[output].data[0])

    forward(graph, point)
    analytic = [t.data.copy() for t in backward(graph, output)]
    worst = GradCheckReport(0.0, -1, -1, 0.0, 0.0, tolerance)
    for k in wrt:
        x = point[k].data
        for j in range(x.size):
            orig = x[j]
            x[j] = orig + eps
            fp = f()
            x[j] = orig - eps
            fm = f()
            x[j] = orig
            num = (fp - fm) / (2.0 * eps)
            ana = analytic[k][j]
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            if rel > worst.max_rel_error or worst.input_index < 0:
                worst = GradCheckReport(rel, k, j, float(ana), float(num), tolerance)
    return worst


def evaluate(build: Callable[[Graph], int], *arrays) -> tuple[float | np.ndarray, Graph]:
    """Build a throwaway graph over ``arrays`` and return the output value.

    ``build`` receives the graph after one input per array has been declared
    (in order, as ``graph.inputs``) and returns the output node.
    """
    g = Graph()
    tensors = []
    for a in arrays:
        t = Tensor.from_array(a)
        g.input(t.shape)
        tensors.append(t)
    out = build(g)
    vals = forward(g, tensors)
    v = vals[out].value
    return (float(v) if v.ndim == 0 else v.copy()), g
