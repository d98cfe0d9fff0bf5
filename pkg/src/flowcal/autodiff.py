"""Reverse-mode automatic differentiation on dense float64 arrays.

A :class:`Graph` is a tape.  Every operation applied to a :class:`Node`
appends a record (op kind, parent ids, cached forward value, local
backward rule) to the tape of its inputs, so the record list is always in
topological order.  :meth:`Graph.backward` walks that list in exact reverse
order and accumulates fan-out gradients by addition, which makes gradients
bit-reproducible run to run.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "NonFiniteError",
    "Node",
    "Graph",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "conv1d",
    "correlate1d",
    "exp",
    "log",
    "tanh",
    "sum",
    "sqnorm",
    "reshape",
    "concat",
    "slice",
    "scale",
    "shift",
    "forward_eval",
    "backward",
    "fd_gradient",
    "AdamState",
    "adam_step",
]


class AutodiffError(Exception):
    """Base class for graph evaluation errors."""


class ShapeError(AutodiffError, ValueError):
    def __init__(self, label: str, detail: str):
        super().__init__(f"{label}: {detail}")
        self.node = label


class NonFiniteError(AutodiffError, FloatingPointError):
    def __init__(self, label: str, detail: str = "non-finite value"):
        super().__init__(f"{label}: {detail}")
        self.node = label


def _as_array(value) -> np.ndarray:
    return np.array(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Node:
    """A value on a graph tape."""

    __slots__ = ("graph", "id", "op", "value", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, graph, node_id, op, value, parents, backward_fn, requires_grad, name=None):
        self.graph = graph
        self.id = node_id
        self.op = op
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def label(self) -> str:
        suffix = f" '{self.name}'" if self.name else ""
        return f"node#{self.id}<{self.op}>{suffix}"

    def __repr__(self) -> str:
        return f"Node({self.label}, shape={self.shape})"

    def __add__(self, other):
        if np.isscalar(other):
            return shift(self, other)
        return add(self, other)

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        if np.isscalar(other):
            return shift(self, -other)
        return sub(self, other)

    def __rsub__(self, other):
        if np.isscalar(other):
            return shift(scale(self, -1.0), other)
        return sub(self.graph.const(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __rtruediv__(self, other):
        return div(self.graph.const(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Graph:
    """Tape of operation records.

    ``record=False`` builds values without keeping the tape, for inference
    passes where no gradient is needed and memory should be released as
    soon as intermediates go out of scope.
    """

    def __init__(self, record: bool = True, check_finite: bool = True):
        self.record = record
        self.check_finite = check_finite
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}
        self.inputs: dict[str, Node] = {}
        self._count = 0

    def _leaf(self, value, op: str, name: str | None, trainable: bool) -> Node:
        arr = _as_array(value)
        node = Node(self, self._count, op, arr, (), None, trainable and self.record, name)
        self._count += 1
        if self.check_finite and not np.all(np.isfinite(arr)):
            raise NonFiniteError(node.label)
        if self.record:
            self.nodes.append(node)
        return node

    def param(self, name: str, value) -> Node:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already bound")
        node = self._leaf(value, "param", name, trainable=True)
        self.params[name] = node
        return node

    def input(self, name: str, value) -> Node:
        node = self._leaf(value, "input", name, trainable=False)
        self.inputs[name] = node
        return node

    def const(self, value) -> Node:
        return self._leaf(value, "const", None, trainable=False)

    def lift(self, value) -> Node:
        if isinstance(value, Node):
            if value.graph is not self:
                raise AutodiffError(f"{value.label} belongs to a different graph")
            return value
        return self.const(value)

    def emit(self, op: str, value: np.ndarray, parents: Sequence[Node], backward_fn) -> Node:
        requires = self.record and any(p.requires_grad for p in parents)
        node = Node(
            self,
            self._count,
            op,
            value,
            tuple(parents) if requires else (),
            backward_fn if requires else None,
            requires,
        )
        self._count += 1
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(node.label)
        if self.record:
            self.nodes.append(node)
        return node

    def backward(self, loss: Node, wrt: Sequence[Node] | None = None) -> dict:
        """Gradients of scalar ``loss``.

        Returns ``{param name: gradient}`` for every trainable parameter of
        the graph (zeros where unreached).  With ``wrt`` the gradients of
        those nodes are returned instead, in the same order, as a list.
        """
        if not self.record:
            raise AutodiffError("graph was built with record=False")
        if loss.graph is not self:
            raise AutodiffError(f"{loss.label} belongs to a different graph")
        if loss.value.size != 1:
            raise ShapeError(loss.label, f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
        # node ids equal tape positions on a recording graph
        for node in reversed(self.nodes[: loss.id + 1]):
            g = grads.get(node.id)
            if g is None or node.backward_fn is None:
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent.id)
                grads[parent.id] = pg if prev is None else prev + pg
            if node is not loss:
                del grads[node.id]
        if wrt is not None:
            return [grads.get(n.id, np.zeros_like(n.value)) for n in wrt]
        return {name: grads.get(n.id, np.zeros_like(n.value)) for name, n in self.params.items()}


def _binary_shape(op: str, a: Node, b: Node) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"node#{a.graph._count}<{op}>", f"cannot broadcast {a.shape} with {b.shape}") from None


def _pair(a, b):
    if isinstance(a, Node):
        return a, a.graph.lift(b)
    return b.graph.lift(a), b


def add(a, b) -> Node:
    a, b = _pair(a, b)
    _binary_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return a.graph.emit("add", a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    a, b = _pair(a, b)
    _binary_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return a.graph.emit("sub", a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Node:
    a, b = _pair(a, b)
    _binary_shape("mul", a, b)
    av, bv = a.value, b.value
    return a.graph.emit(
        "mul", av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def div(a, b) -> Node:
    a, b = _pair(a, b)
    _binary_shape("div", a, b)
    av, bv = a.value, b.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = av / bv

    def back(g):
        ga = g / bv
        return _unbroadcast(ga, av.shape), _unbroadcast(-ga * out, bv.shape)

    return a.graph.emit("div", out, (a, b), back)


def matmul(a, b) -> Node:
    """2-D matrix product ``a @ b``."""
    a, b = _pair(a, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"node#{a.graph._count}<matmul>", f"incompatible operands {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return a.graph.emit("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def _shift_taps(x: np.ndarray, kernel: np.ndarray, axis: int, flip: bool) -> np.ndarray:
    # out[n] = sum_k kernel[k] * x[n - (k - h)]   (flip=False, convolution)
    # out[n] = sum_k kernel[k] * x[n + (k - h)]   (flip=True, correlation)
    h = (kernel.size - 1) // 2
    n = x.shape[axis]
    xm = np.moveaxis(x, axis, -1)
    out = np.zeros_like(xm)
    for k, w in enumerate(kernel):
        if w == 0.0:
            continue
        lag = (h - k) if flip else (k - h)
        if lag >= n or -lag >= n:
            continue
        if lag >= 0:
            out[..., lag:] += w * xm[..., : n - lag]
        else:
            out[..., : n + lag] += w * xm[..., -lag:]
    return np.moveaxis(out, -1, axis)


def _check_kernel(kernel) -> np.ndarray:
    k = np.asarray(kernel, dtype=np.float64)
    if k.ndim != 1 or k.size % 2 == 0:
        raise ValueError("kernel must be 1-D with odd length (centered)")
    return k


def conv1d(x: Node, kernel, axis: int = -1) -> Node:
    """Same-length, zero-padded convolution with a fixed centered kernel."""
    k = _check_kernel(kernel)
    ax = axis % x.value.ndim
    out = _shift_taps(x.value, k, ax, flip=False)
    return x.graph.emit("conv1d", out, (x,), lambda g: (_shift_taps(g, k, ax, flip=True),))


def correlate1d(x: Node, kernel, axis: int = -1) -> Node:
    """Adjoint of :func:`conv1d` for the same kernel."""
    k = _check_kernel(kernel)
    ax = axis % x.value.ndim
    out = _shift_taps(x.value, k, ax, flip=True)
    return x.graph.emit("correlate1d", out, (x,), lambda g: (_shift_taps(g, k, ax, flip=False),))


def exp(x: Node) -> Node:
    with np.errstate(over="ignore"):
        out = np.exp(x.value)
    return x.graph.emit("exp", out, (x,), lambda g: (g * out,))


def log(x: Node) -> Node:
    xv = x.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xv)
    return x.graph.emit("log", out, (x,), lambda g: (g / xv,))


def tanh(x: Node) -> Node:
    out = np.tanh(x.value)
    return x.graph.emit("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def sum(x: Node, axis: int | None = None) -> Node:  # noqa: A001
    shape = x.shape
    out = np.sum(x.value, axis=axis)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return x.graph.emit("sum", np.asarray(out, dtype=np.float64), (x,), back)


def sqnorm(x: Node, axis: int | None = None) -> Node:
    """Squared L2 norm over all entries, or along ``axis``."""
    xv = x.value
    out = np.sum(xv * xv, axis=axis)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (2.0 * g * xv,)

    return x.graph.emit("sqnorm", np.asarray(out, dtype=np.float64), (x,), back)


def reshape(x: Node, shape) -> Node:
    old = x.shape
    try:
        out = x.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"node#{x.graph._count}<reshape>", f"cannot reshape {old} to {tuple(shape)}") from None
    return x.graph.emit("reshape", out, (x,), lambda g: (g.reshape(old),))


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    graph = nodes[0].graph
    nodes = [graph.lift(n) for n in nodes]
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"node#{graph._count}<concat>", str(exc)) from None
    ax = axis % out.ndim
    bounds = np.cumsum([n.shape[ax] for n in nodes])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=ax))

    return graph.emit("concat", out, nodes, back)


def slice(x: Node, index, axis: int = -1) -> Node:  # noqa: A001
    """Select along ``axis`` with a python slice or an integer index array."""
    ax = axis % x.value.ndim
    sel = [np.s_[:]] * x.value.ndim
    if isinstance(index, (list, tuple, np.ndarray)):
        index = np.asarray(index, dtype=np.intp)
        if index.ndim != 1 or (index.size and (index.min() < -x.shape[ax] or index.max() >= x.shape[ax])):
            raise ShapeError(f"node#{x.graph._count}<slice>", f"index out of range for axis of length {x.shape[ax]}")
    sel[ax] = index
    sel = tuple(sel)
    shape = x.shape
    out = x.value[sel]

    def back(g):
        full = np.zeros(shape)
        if isinstance(index, np.ndarray):
            np.add.at(full, sel, g)
        else:
            full[sel] = g
        return (full,)

    return x.graph.emit("slice", np.array(out), (x,), back)


def scale(x: Node, c: float) -> Node:
    c = float(c)
    return x.graph.emit("scale", x.value * c, (x,), lambda g: (g * c,))


def shift(x: Node, c: float) -> Node:
    c = float(c)
    return x.graph.emit("shift", x.value + c, (x,), lambda g: (g,))


def forward_eval(
    build: Callable[..., Node | Sequence[Node] | Mapping[str, Node]],
    inputs: Mapping[str, np.ndarray] | None = None,
    params: Mapping[str, np.ndarray] | None = None,
):
    """Bind named inputs/parameters on a fresh graph and run ``build``.

    ``build(graph, nodes)`` receives the graph and a dict of the bound leaf
    nodes; it returns the output node(s).  Returns ``(graph, outputs)``.
    """
    graph = Graph()
    nodes: dict[str, Node] = {}
    for name, value in (params or {}).items():
        nodes[name] = graph.param(name, value)
    for name, value in (inputs or {}).items():
        nodes[name] = graph.input(name, value)
    return graph, build(graph, nodes)


def backward(graph: Graph, loss: Node) -> dict[str, np.ndarray]:
    return graph.backward(loss)


def fd_gradient(
    fn: Callable[[dict[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    step: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central finite-difference gradient of a scalar function of named arrays."""
    if not step > 0:
        raise ValueError("step must be positive")
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    grads = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = float(fn(work))
            flat[j] = orig - step
            fm = float(fn(work))
            flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"fd_gradient[{name}][{j}]", "function value is not finite")
            gflat[j] = (fp - fm) / (2.0 * step)
        grads[name] = g
    return grads


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.lr > 0 and 0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("invalid Adam hyperparameters")


def adam_step(
    params: dict[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float | None = None,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied in place to ``params``.

    ``lr`` overrides ``state.lr`` for externally scheduled stepsizes.
    Raises :class:`NonFiniteError` before touching anything if a gradient is
    not finite.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"adam[{name}]", f"gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"adam[{name}]", "non-finite gradient")
    lr = state.lr if lr is None else lr
    if not lr > 0:
        raise ValueError("stepsize must be positive")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
