"""Reverse-mode automatic differentiation over dense float64 arrays.

The graph is built define-by-run: every operation on a :class:`Tensor` that
requires gradients records a :class:`Node` holding its parents and a local
gradient rule. :func:`backward` orders the nodes reachable from a scalar root
topologically and applies the chain rule in reverse.

Broadcasting is deliberately narrow. Two operands of an elementwise op must
either have the same shape, or one of them must match the other's shape with
the leading (batch) dimension removed, or be a scalar.

Conventions for non-smooth points: ``relu'(0) = 0``. Since the margin hinge is
written as ``relu(m - v)``, its gradient at ``v == m`` is also 0.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Node",
    "Graph",
    "Rng",
    "ShapeError",
    "NonFiniteError",
    "GraphError",
    "tensor_op",
    "log_softmax_nll",
    "bce_with_logits",
    "grad_reverse",
    "backward",
    "frozen",
    "finite_diff_check",
    "GradCheckReport",
]

_node_ids = itertools.count()
_local = threading.local()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphError(RuntimeError):
    pass


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


class Node:
    """One recorded operation: its kind, parents and local gradient rule."""

    __slots__ = ("id", "kind", "parents", "needs_grad", "grad_fn", "consumed")

    def __init__(self, kind: str, parents: tuple["Tensor", ...], grad_fn):
        self.id = next(_node_ids)
        self.kind = kind
        self.parents = parents
        # captured at creation so that later unfreezing cannot leak gradients
        self.needs_grad = tuple(p.requires_grad for p in parents)
        # grad_fn(upstream) -> tuple of gradients aligned with parents
        self.grad_fn = grad_fn
        self.consumed = False

    def __repr__(self) -> str:
        return f"Node({self.id}, {self.kind!r})"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, name or "tensor input")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, kind: str, parents, grad_fn) -> "Tensor":
        _check_finite(data, f"output of {kind}")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.node = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out.node = Node(kind, tuple(parents), grad_fn)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def node_id(self) -> int | None:
        return None if self.node is None else self.node.id

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return tensor_op("add", self, other)

    def __radd__(self, other):
        return tensor_op("add", other, self)

    def __sub__(self, other):
        return tensor_op("sub", self, other)

    def __rsub__(self, other):
        return tensor_op("sub", other, self)

    def __mul__(self, other):
        return tensor_op("mul", self, other)

    def __rmul__(self, other):
        return tensor_op("mul", other, self)

    def __neg__(self):
        return tensor_op("mul", self, -1.0)

    def __matmul__(self, other):
        return tensor_op("matmul", self, other)

    def relu(self):
        return tensor_op("relu", self)

    def sigmoid(self):
        return tensor_op("sigmoid", self)

    def square(self):
        return tensor_op("square", self)

    def sum(self, axis: int | None = None):
        return tensor_op("sum", self, axis=axis)

    def mean(self, axis: int | None = None):
        return tensor_op("mean", self, axis=axis)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _broadcast_kind(a: tuple, b: tuple) -> str:
    if a == b:
        return "same"
    if b == () or (len(a) >= 1 and a[1:] == b):
        return "expand_b"
    if a == () or (len(b) >= 1 and b[1:] == a):
        return "expand_a"
    raise ShapeError(f"cannot broadcast shapes {a} and {b}")


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    return grad.sum(axis=0)


def _record_branch(mask: np.ndarray) -> None:
    log = getattr(_local, "branches", None)
    if log is not None:
        log.append(mask)


def tensor_op(kind: str, *inputs, axis: int | None = None) -> Tensor:
    """Apply a primitive and record it on the graph.

    ``kind`` is one of matmul, add, sub, mul, relu, sigmoid, sum, mean, square.
    """
    # overflow surfaces as NonFiniteError rather than as a numpy warning
    with np.errstate(over="ignore", invalid="ignore"):
        return _apply(kind, [_as_tensor(x) for x in inputs], axis)


def _apply(kind: str, xs: list[Tensor], axis: int | None) -> Tensor:
    if kind in ("add", "sub", "mul"):
        if len(xs) != 2:
            raise ShapeError(f"{kind} takes two operands")
        a, b = xs
        _broadcast_kind(a.shape, b.shape)
        sa, sb = a.shape, b.shape
        if kind == "add":
            out = a.data + b.data
            fn = lambda g: (_reduce_to(g, sa), _reduce_to(g, sb))
        elif kind == "sub":
            out = a.data - b.data
            fn = lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb))
        else:
            ad, bd = a.data, b.data
            out = ad * bd
            fn = lambda g: (_reduce_to(g * bd, sa), _reduce_to(g * ad, sb))
        return Tensor._result(out, kind, xs, fn)

    if kind == "matmul":
        a, b = xs
        if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not conform")
        ad, bd = a.data, b.data
        return Tensor._result(ad @ bd, kind, xs, lambda g: (g @ bd.T, ad.T @ g))

    if len(xs) != 1:
        raise ShapeError(f"{kind} takes one operand")
    (x,) = xs
    xd = x.data

    if kind == "relu":
        mask = xd > 0
        _record_branch(mask)
        return Tensor._result(np.where(mask, xd, 0.0), kind, xs, lambda g: (g * mask,))
    if kind == "sigmoid":
        s = _sigmoid(xd)
        return Tensor._result(s, kind, xs, lambda g: (g * s * (1.0 - s),))
    if kind == "square":
        return Tensor._result(xd * xd, kind, xs, lambda g: (2.0 * xd * g,))
    if kind in ("sum", "mean"):
        shape = xd.shape
        if axis is None:
            count = xd.size
            out = np.asarray(xd.sum())
        else:
            if not -xd.ndim <= axis < xd.ndim:
                raise ShapeError(f"axis {axis} out of range for shape {shape}")
            count = shape[axis]
            out = xd.sum(axis=axis)
        if count == 0:
            raise ShapeError(f"{kind} over an empty axis")
        scale = 1.0 / count if kind == "mean" else 1.0
        if kind == "mean":
            out = out * scale

        def fn(g, shape=shape, axis=axis, scale=scale):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g * scale, shape).copy(),)

        return Tensor._result(out, kind, xs, fn)
    raise ValueError(f"unknown op kind {kind!r}")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def log_softmax_nll(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    ld = logits.data
    if ld.ndim != 2:
        raise ShapeError(f"logits must be batch x K, got {logits.shape}")
    n, k = ld.shape
    if n == 0:
        raise ShapeError("empty batch")
    if k < 2:
        raise ShapeError("need at least two classes")
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise ValueError("labels must be class indices")
        labels = labels.astype(np.int64)
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    shifted = ld - ld.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(n)
    out = np.asarray(-logp[rows, labels].mean())

    def fn(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return Tensor._result(out, "log_softmax_nll", [logits], fn)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy of 0/1 ``targets`` given raw logits.

    Uses ``softplus(s) - t*s`` with a stable softplus.
    """
    t = np.asarray(targets, dtype=np.float64).reshape(logits.shape)
    s = logits.data
    if s.size == 0:
        raise ShapeError("empty batch")
    softplus = np.maximum(s, 0.0) + np.log1p(np.exp(-np.abs(s)))
    out = np.asarray((softplus - t * s).mean())
    n = s.size

    def fn(g):
        return ((_sigmoid(s) - t) * (g / n),)

    return Tensor._result(out, "bce_with_logits", [logits], fn)


def grad_reverse(x: Tensor, scale: float) -> Tensor:
    """Identity on the forward pass; multiplies the gradient by ``-scale``."""
    return Tensor._result(x.data.copy(), "grad_reverse", [x], lambda g: (-scale * g,))


@dataclass
class Graph:
    """Nodes reachable from a root, in topological order (parents first)."""

    nodes: list[Node]

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        order: list[Node] = []
        if root.node is None:
            return cls(order)
        seen: set[int] = set()
        stack: list[tuple[Node, bool]] = [(root.node, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.id in seen:
                continue
            seen.add(node.id)
            stack.append((node, True))
            for p in node.parents:
                if p.node is not None and p.node.id not in seen:
                    stack.append((p.node, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from ``root`` that requires it.

    Leaf gradients accumulate; callers zero them first. A graph can be
    traversed once: calling backward again without a fresh forward pass raises.
    """
    if root.data.size != 1 or root.data.ndim > 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise GraphError("root does not depend on any tensor requiring grad")
    if root.node is None:
        root.grad = np.ones_like(root.data) if root.grad is None else root.grad + 1.0
        return
    graph = Graph.from_root(root)
    if any(n.consumed for n in graph.nodes):
        raise GraphError("graph already consumed by a previous backward; re-run forward")
    grads: dict[int, np.ndarray] = {root.node.id: np.ones_like(root.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(node.id, None)
        node.consumed = True
        if g is None:
            continue
        parent_grads = node.grad_fn(g)
        for parent, needed, pg in zip(node.parents, node.needs_grad, parent_grads):
            if not needed:
                continue
            if parent.node is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                pid = parent.node.id
                grads[pid] = grads[pid] + pg if pid in grads else pg


@contextmanager
def frozen(params: Iterable[Tensor]) -> Iterator[None]:
    """Temporarily treat ``params`` as constants."""
    params = list(params)
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag


@contextmanager
def record_branches() -> Iterator[list[np.ndarray]]:
    """Collect the branch masks of every piecewise op evaluated inside the block."""
    prev = getattr(_local, "branches", None)
    log: list[np.ndarray] = []
    _local.branches = log
    try:
        yield log
    finally:
        _local.branches = prev


class Rng:
    """Seeded PCG64 stream. ``split`` hands out independent child streams."""

    def __init__(self, seed: int, _seq: np.random.SeedSequence | None = None):
        self.seed = int(seed)
        self._seq = _seq if _seq is not None else np.random.SeedSequence(self.seed)
        self.generator = np.random.Generator(np.random.PCG64(self._seq))
        self.counter = 0

    def split(self, n: int = 1) -> list["Rng"]:
        children = self._seq.spawn(n)
        self.counter += n
        return [Rng(self.seed, c) for c in children]

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    mean_rel_error: float
    checked: int
    excluded: int


@dataclass
class GradCheckReport:
    params: list[ParamCheck] = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def max_rel_error(self) -> float:
        vals = [p.max_rel_error for p in self.params if p.checked]
        return max(vals) if vals else 0.0

    @property
    def mean_rel_error(self) -> float:
        total = sum(p.checked for p in self.params)
        if not total:
            return 0.0
        return sum(p.mean_rel_error * p.checked for p in self.params) / total

    @property
    def checked(self) -> int:
        return sum(p.checked for p in self.params)

    @property
    def excluded(self) -> int:
        return sum(p.excluded for p in self.params)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def merge(self, other: "GradCheckReport", prefix: str = "") -> None:
        for p in other.params:
            self.params.append(ParamCheck(prefix + p.name, p.max_rel_error,
                                          p.mean_rel_error, p.checked, p.excluded))


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Sequence[Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    grad_scale: Mapping[str, float] | None = None,
) -> GradCheckReport:
    """Compare autodiff gradients of ``loss_fn()`` with central differences.

    An entry is excluded as non-comparable when the branch pattern of any
    piecewise op (relu, hinge) differs between ``w - step``, ``w`` and
    ``w + step``: the difference quotient then straddles a kink.

    ``grad_scale`` maps parameter names to the factor relating autodiff to the
    plain derivative (``-lam`` for parameters behind a gradient reversal).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if not isinstance(params, Mapping):
        params = {p.name or f"p{i}": p for i, p in enumerate(params)}
    grad_scale = grad_scale or {}

    for p in params.values():
        p.grad = None
    with record_branches() as base_branches:
        loss = loss_fn()
    backward(loss)
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in params.items()}

    def evaluate() -> tuple[float, list[np.ndarray]]:
        with record_branches() as log:
            value = loss_fn().item()
        return value, log

    def same_branches(log) -> bool:
        return len(log) == len(base_branches) and all(
            np.array_equal(a, b) for a, b in zip(log, base_branches))

    report = GradCheckReport(tolerance=tolerance)
    for name, p in params.items():
        scale = grad_scale.get(name, 1.0)
        errors: list[float] = []
        excluded = 0
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus, log_plus = evaluate()
            flat[i] = orig - step
            f_minus, log_minus = evaluate()
            flat[i] = orig
            if not (same_branches(log_plus) and same_branches(log_minus)):
                excluded += 1
                continue
            numeric = scale * (f_plus - f_minus) / (2.0 * step)
            errors.append(relative_error(float(analytic[name].reshape(-1)[i]), numeric))
        report.params.append(ParamCheck(
            name,
            max(errors) if errors else 0.0,
            float(np.mean(errors)) if errors else 0.0,
            len(errors),
            excluded,
        ))
    for p in params.values():
        p.grad = None
    return report
