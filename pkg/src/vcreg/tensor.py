"""Dense float64 tensors with a small reverse-mode autodiff engine.

Every operation records a node on the thread's active :class:`Graph` when
grad tracking is on and at least one input requires a gradient. Backward
walks the nodes in exact reverse insertion order.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NonFiniteError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


def _freeze(arr: np.ndarray) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in tensor of shape {arr.shape}")
    arr.flags.writeable = False
    return arr


class Tensor:
    """Immutable float64 array plus autodiff bookkeeping.

    ``data`` is read-only; optimizers rebind it rather than writing in place.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_graph", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _freeze(np.array(data, dtype=np.float64))
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._graph: Graph | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = _freeze(np.asarray(arr, dtype=np.float64))
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._graph = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._graph is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def assign(self, arr: np.ndarray) -> None:
        """Rebind a leaf's value (used by optimizers)."""
        if not self.is_leaf:
            raise GraphError("only leaf tensors can be reassigned")
        arr = np.array(arr, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise ShapeError(f"assign shape {arr.shape} != {self.data.shape}")
        self.data = _freeze(arr)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __hash__ = object.__hash__

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub_broadcast(self, other)

    def __rsub__(self, other):
        return sub_broadcast(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# graph state


class Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Graph:
    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __len__(self):
        return len(self.nodes)


_state = threading.local()


def _active() -> Graph:
    g = getattr(_state, "graph", None)
    if g is None or g.consumed:
        g = _state.graph = Graph()
    return g


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def reset_graph() -> None:
    """Drop any recorded-but-unused nodes on this thread."""
    _state.graph = Graph()


def _record(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward_fn) -> Tensor:
    t = Tensor._wrap(out)
    if grad_enabled() and any(i.requires_grad for i in inputs):
        graph = _active()
        t.requires_grad = True
        t._graph = graph
        graph.nodes.append(Node(op, tuple(inputs), t, backward_fn))
    return t


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) for every leaf reachable from ``loss``.

    Leaf ``.grad`` fields are overwritten with the full gradient. The graph
    is consumed; a second call needs a fresh forward pass.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = loss._graph
    if graph is None or not loss.requires_grad:
        raise GraphError("loss is not connected to any parameter")
    if graph.consumed:
        raise GraphError("graph already consumed by backward; run forward again")

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise ShapeError(f"{node.op}: grad shape {gi.shape} != input {inp.shape}")
            key = id(inp)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
            if inp._graph is None:
                leaves[key] = inp

    graph.consumed = True
    graph.nodes = []
    out = {}
    for key, leaf in leaves.items():
        g = grads[key]
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {leaf.name or 'leaf'}")
        leaf.grad = g
        out[leaf] = g
    return out


# --------------------------------------------------------------------------
# helpers


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# --------------------------------------------------------------------------
# forward ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub_broadcast(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd,
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _record("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _record("square", (x,), xd * xd, lambda g: (2.0 * xd * g,))


def sqrt(x: Tensor) -> Tensor:
    if (x.data < 0).any():
        raise NonFiniteError("sqrt of negative value")
    out = np.sqrt(x.data)
    return _record("sqrt", (x,), out, lambda g: (g / (2.0 * out),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = np.array(x.data.reshape(tuple(shape)))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} to {tuple(shape)}") from None
    return _record("reshape", (x,), out, lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _record("transpose", (x,), out, lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", (x,), out, bw)


def mean_over_axis(x: Tensor, axis, keepdims: bool = False) -> Tensor:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    count = int(np.prod([x.shape[a] for a in axes]))
    shape = x.shape
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _record("mean", (x,), out, bw)


def diagonal(x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeError(f"diagonal: need a square matrix, got {x.shape}")
    return _record("diagonal", (x,), np.diag(x.data).copy(), lambda g: (np.diag(g),))


def smooth_l1(x: Tensor, delta: float) -> Tensor:
    """Elementwise x**2 inside |x| <= delta, 2*delta*|x| - delta**2 outside."""
    xd = x.data
    inside = np.abs(xd) <= delta
    out = np.where(inside, xd * xd, 2.0 * delta * np.abs(xd) - delta * delta)
    slope = np.where(inside, 2.0 * xd, 2.0 * delta * np.sign(xd))
    return _record("smooth_l1", (x,), out, lambda g: (g * slope,))


def log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true class over the batch."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross entropy: logits {logits.shape}, labels {labels.shape}")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    labels = labels.astype(np.int64)
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return _record("softmax_xent", (logits,), np.asarray(loss), bw)


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    """Cross-correlation via im2col. x: (N, C, H, W), weight: (F, C, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} vs weight {weight.shape}")
    n, c, h, w = x.shape
    f, _, kh, kw = weight.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {h}x{w} too small for {kh}x{kw} kernel")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (N, Ho, Wo, C, kh, kw) -> rows are output locations
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(f, c * kh * kw)
    out = (cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    xshape, wshape = x.shape, weight.shape

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gw = (gmat.T @ cols).reshape(wshape)
        gcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
        gx = gxp[:, :, padding:padding + h, padding:padding + w]
        return (np.ascontiguousarray(gx).reshape(xshape), gw)

    return _record("conv2d", (x, weight), out, bw)


def custom_grad(x: Tensor, callback: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> Tensor:
    """Identity in the forward pass; ``callback(x, g)`` rewrites the gradient.

    The output shares ``x``'s buffer, so activations stay bit-identical.
    """
    xd = x.data

    def bw(g):
        out = callback(xd, g)
        if out.shape != g.shape:
            raise ShapeError(f"custom grad callback changed shape {g.shape} -> {out.shape}")
        return (out,)

    t = Tensor.__new__(Tensor)
    t.data = xd
    t.requires_grad = False
    t.grad = None
    t.name = None
    t._graph = None
    if grad_enabled() and x.requires_grad:
        graph = _active()
        t.requires_grad = True
        t._graph = graph
        graph.nodes.append(Node("custom_grad", (x,), t, bw))
    return t


FORWARD_OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "relu": relu,
    "reshape": reshape,
    "mean_over_axis": mean_over_axis,
    "sub_broadcast": sub_broadcast,
    "square": square,
    "sqrt": sqrt,
    "sum": sum,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = FORWARD_OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op {kind!r}") from None
    return fn(*inputs, **kwargs)


# --------------------------------------------------------------------------
# optimisation


def sgd_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    velocity: list[np.ndarray | None],
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    decay_mask: Sequence[bool] | None = None,
) -> list[Tensor]:
    """Classical momentum SGD; weight decay is folded into the gradient first.

    ``velocity`` is updated in place (one slot per parameter).
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if decay_mask is None:
        decay_mask = [True] * len(params)
    for k, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape}")
        if weight_decay and decay_mask[k]:
            g = g + weight_decay * p.data
        if momentum:
            v = g if velocity[k] is None else momentum * velocity[k] + g
            velocity[k] = v
        else:
            v = g
        p.assign(p.data - lr * v)
    return list(params)


class SGD:
    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0, no_decay: Iterable[str] = ()):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.names = list(params)
        self.params = [params[k] for k in self.names]
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        skip = tuple(no_decay)
        self.decay_mask = [not any(s in name for s in skip) for name in self.names]
        self.velocity: list[np.ndarray | None] = [None] * len(self.params)

    def step(self, grads: dict[Tensor, np.ndarray], lr: float | None = None) -> None:
        gs = [grads.get(p, np.zeros(p.shape)) for p in self.params]
        sgd_step(self.params, gs, self.velocity, self.lr if lr is None else lr,
                 self.momentum, self.weight_decay, self.decay_mask)


def rng(seed: int) -> np.random.Generator:
    """PCG64 generator; the single source of randomness for a run."""
    return np.random.Generator(np.random.PCG64(seed))


def he_normal(gen: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    return gen.standard_normal(tuple(shape)) * np.sqrt(2.0 / fan_in)
