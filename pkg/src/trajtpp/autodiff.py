"""Dense tensors with reverse-mode differentiation.

Every op records its parents and a backward closure on the output tensor.
``ComputeGraph.trace`` orders the recorded nodes topologically and
``backward`` walks them in exact reverse order.  Shapes are never
broadcast implicitly; use ``expand`` to align a tensor before combining it.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

DEFAULT_DTYPE = np.float32

_state = {"dtype": DEFAULT_DTYPE, "grad_enabled": True}


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the floating dtype of newly created tensors."""
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


def current_dtype():
    return _state["dtype"]


def _check_finite(values, what):
    if not np.isfinite(values).all():
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _op="leaf"):
        arr = np.asarray(data, dtype=_state["dtype"])
        if _op == "leaf":
            _check_finite(arr, "tensor input")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad and _op == "leaf" else None
        self._parents = _parents
        self._backward = None
        self.op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, op, backward_fn):
    track = _state["grad_enabled"] and any(p.requires_grad for p in parents)
    with np.errstate(over="ignore"):
        # overflow surfaces as the NonFiniteError below
        data = np.asarray(data, dtype=_state["dtype"])
    _check_finite(data, f"output of {op}")
    out = Tensor(data, requires_grad=track, _parents=parents if track else (), _op=op)
    if track:
        out._backward = backward_fn
    return out


def _need_same_shape(kind, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} differ")


# --------------------------------------------------------------------------
# ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _need_same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), "add", lambda g: (g, g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _need_same_shape("mul", a, b)
    return _make(a.data * b.data, (a, b), "mul", lambda g: (g * b.data, g * a.data))


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), "scale", lambda g: (g * c,))


def matmul(a, b):
    """Matrix product over the last two axes.

    ``b`` may be 2-D (a shared weight) while ``a`` carries batch axes;
    otherwise batch axes must match exactly.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} need >= 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims of {a.shape} and {b.shape} differ")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} differ")
    out = np.matmul(a.data, b.data)

    def _bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _make(out, (a, b), "matmul", _bw)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != ax
        ):
            raise ShapeError(f"concat: shapes {ref.shape} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def _bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), "concat", _bw)


def take(a, index):
    """Basic or advanced indexing; covers slicing, gathers and embedding lookups."""
    a = as_tensor(a)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: index invalid for shape {a.shape}: {exc}") from None

    def _bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, (a,), "slice", _bw)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from None
    return _make(out, (a,), "reshape", lambda g: (g.reshape(old),))


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), "transpose", lambda g: (np.transpose(g, inv),))


def expand(a, shape):
    """Explicitly repeat ``a`` to ``shape`` (new leading axes or size-1 axes)."""
    a = as_tensor(a)
    shape = tuple(shape)
    lead = len(shape) - a.ndim
    if lead < 0 or any(s != 1 and s != t for s, t in zip(a.shape, shape[lead:])):
        raise ShapeError(f"expand: cannot expand {a.shape} to {shape}")
    src = a.shape

    def _bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, s in enumerate(src) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make(np.broadcast_to(a.data, shape), (a,), "expand", _bw)


def sum(a, axis=None, keepdims=False):  # noqa: A001
    a = as_tensor(a)
    # 64-bit accumulation; long survival sums otherwise lose digits
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), "sum", _bw)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else int(np.prod([a.shape[d] for d in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise NonFiniteError("log of non-positive value")
    return _make(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def softplus(a):
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    # underflow for very negative inputs would break strict positivity
    out = np.maximum(out, np.finfo(_state["dtype"]).tiny)
    return _make(out, (a,), "softplus", lambda g: (g * _sigmoid(a.data),))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), "softmax", _bw)


def masked_fill(a, mask, value):
    """Replace entries where ``mask`` is true with the constant ``value``."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"masked_fill: mask {mask.shape} and tensor {a.shape} differ")
    out = np.where(mask, value, a.data)
    return _make(out, (a,), "masked_fill", lambda g: (np.where(mask, 0.0, g),))


OPS = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "concat": concat,
    "slice": take,
    "softmax": softmax,
    "softplus": softplus,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "sum": sum,
    "mean": mean,
    "scale": scale,
    "masked_fill": masked_fill,
    "reshape": reshape,
    "transpose": transpose,
    "expand": expand,
}

_VARIADIC = {"concat"}


def tensor_op(kind, inputs, **attrs):
    """Dispatch ``kind`` by name, e.g. ``tensor_op("softmax", [x], axis=-1)``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    if kind in _VARIADIC:
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)


# --------------------------------------------------------------------------
# graph + backward


@dataclass
class ComputeGraph:
    """Topologically ordered nodes reachable from an output tensor."""

    nodes: list = field(default_factory=list)

    @classmethod
    def trace(cls, output):
        order, seen = [], set()
        stack = [(output, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def leaves(self):
        return [n for n in self.nodes if n.op == "leaf" and n.requires_grad]


def backward(loss, graph=None):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every trainable leaf.

    Gradients add to whatever is already stored; call ``zero_grad`` first
    for a fresh pass.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = ComputeGraph.trace(loss)
    if not loss.requires_grad:
        return graph
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.op == "leaf":
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.data.dtype)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return graph


def grad_check(f, x, eps=1e-3, dtype=np.float64):
    """Max relative error between autodiff and central differences.

    ``f`` maps a Tensor to a scalar Tensor.  Both routes are evaluated at
    ``dtype`` (64-bit by default) so the comparison measures gradient
    formulas rather than float32 roundoff.
    """
    if not 1e-6 <= eps <= 1e-2:
        raise ValueError("eps must lie in [1e-6, 1e-2]")
    base = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with precision(dtype):
        leaf = Tensor(base, requires_grad=True)
        y = f(leaf)
        if not np.isfinite(y.data).all():
            raise NonFiniteError("f(x) is not finite")
        backward(y)
        analytic = leaf.grad.astype(np.float64).ravel()
        numeric = np.empty_like(analytic)
        flat = base.ravel()
        with no_grad():
            for i in range(flat.size):
                xp, xm = flat.copy(), flat.copy()
                xp[i] += eps
                xm[i] -= eps
                fp = float(f(Tensor(xp.reshape(base.shape))).item())
                fm = float(f(Tensor(xm.reshape(base.shape))).item())
                numeric[i] = (fp - fm) / (2 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One bias-corrected Adam update in place.

    ``params`` and ``grads`` are name-keyed dicts of Tensor and ndarray.
    """
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam: grad {g.shape} and param {p.shape} for {name!r} differ")
        if name in state.m and state.m[name].shape != p.shape:
            raise ShapeError(f"adam: state {state.m[name].shape} and param {p.shape} for {name!r} differ")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data.astype(np.float64) - update).astype(p.data.dtype)
    return params, state
