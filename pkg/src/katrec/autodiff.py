"""Dense tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent.  Gradients
are accumulated by :func:`backward`, which walks the graph once in reverse
topological order.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        desc = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, op={self.op})"

    def backward(self):
        return backward(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise binary -----------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (both operands >= 2-D)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "matmul")


# -- shape ops --------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ShapeError("concat", ref, t.shape)
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None

    def bw(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), bw, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inv = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(x.data, axes), (x,), bw, "transpose")


def take(x: Tensor, index) -> Tensor:
    """Gather rows of ``x`` along axis 0; ``index`` may have any shape."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < -x.shape[0] or index.max() >= x.shape[0]):
        raise IndexError(f"take: index out of range for axis of size {x.shape[0]}")

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index.reshape(-1), g.reshape((-1,) + x.shape[1:]))
        return (out,)

    return _make(x.data[index], (x,), bw, "take")


def segment_sum(x: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of ``x`` into ``num_segments`` buckets given by ``segment_ids``."""
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    if segment_ids.shape != x.shape[:1]:
        raise ShapeError("segment_sum", x.shape, segment_ids.shape)
    out = np.zeros((num_segments,) + x.shape[1:], dtype=x.dtype)
    np.add.at(out, segment_ids, x.data)

    def bw(g):
        return (g[segment_ids],)

    return _make(out, (x,), bw, "segment_sum")


def segment_softmax(scores: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Softmax of a 1-D score vector within each segment."""
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    if scores.ndim != 1 or segment_ids.shape != scores.shape:
        raise ShapeError("segment_softmax", scores.shape, segment_ids.shape)
    s = scores.data
    seg_max = np.full(num_segments, -np.inf, dtype=s.dtype)
    np.maximum.at(seg_max, segment_ids, s)
    e = np.exp(s - seg_max[segment_ids])
    denom = np.zeros(num_segments, dtype=s.dtype)
    np.add.at(denom, segment_ids, e)
    w = e / denom[segment_ids]

    def bw(g):
        dot = np.zeros(num_segments, dtype=s.dtype)
        np.add.at(dot, segment_ids, w * g)
        return (w * (g - dot[segment_ids]),)

    return _make(w, (scores,), bw, "segment_softmax")


# -- reductions -------------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def sq_norm(x: Tensor) -> Tensor:
    """Squared L2 norm of all entries (scalar)."""

    def bw(g):
        return (2.0 * g * x.data,)

    return _make(np.sum(x.data * x.data), (x,), bw, "sq_norm")


# -- elementwise unary ------------------------------------------------------

def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor, eps: float | None = None) -> Tensor:
    """Natural log; with ``eps`` the input is clamped from below (zero gradient there)."""
    data = x.data
    clamped = None
    if eps is not None:
        clamped = data < eps
        data = np.where(clamped, eps, data)

    def bw(g):
        gx = g / data
        if clamped is not None:
            gx = np.where(clamped, 0.0, gx)
        return (gx,)

    return _make(np.log(data), (x,), bw, "log")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data).astype(x.dtype)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log_sigmoid(x: Tensor) -> Tensor:
    """Numerically stable ``log(sigmoid(x))``."""
    z = x.data
    out = np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))
    return _make(out, (x,), lambda g: (g * _sigmoid(-z),), "log_sigmoid")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, slope * x.data)
    return _make(out, (x,), lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF written through erf."""
    z = x.data
    cdf = 0.5 * (1.0 + erf(z * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * z * z)
    return _make(z * cdf, (x,), lambda g: (g * (cdf + z * pdf),), "gelu")


def softmax(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` is a boolean array broadcastable to ``x``; False entries get
    exactly zero probability.  Rows with no valid entry come out all zero.
    """
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=-1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    denom = e.sum(axis=-1, keepdims=True)
    out = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize over the last axis then apply ``gamma * xhat + beta``."""
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def bw(g):
        gxhat = g * gamma.data
        gx = inv / n * (
            n * gxhat
            - gxhat.sum(axis=-1, keepdims=True)
            - xhat * np.sum(gxhat * xhat, axis=-1, keepdims=True)
        )
        lead = tuple(range(x.ndim - 1))
        return gx, np.sum(g * xhat, axis=lead), np.sum(g, axis=lead)

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), bw, "layer_norm")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity when ``train`` is False or ``rate`` is 0."""
    if not train or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# -- graph traversal --------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Returns a mapping from each leaf tensor that requires grad to its gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    order = _toposort(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return leaves


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- initialization & optimization -----------------------------------------

def trunc_normal_init(shape, low=-0.02, high=0.02, std=0.02, rng=None, dtype=np.float64):
    """Zero-mean normal samples with standard deviation ``std`` restricted to [low, high].

    Out-of-range draws are resampled until every entry lies in the interval.
    """
    if not low < high:
        raise ValueError(f"trunc_normal_init needs low < high, got [{low}, {high}]")
    if rng is None:
        raise ValueError("trunc_normal_init requires an explicit Generator")
    size = int(np.prod(shape))
    out = rng.normal(0.0, std, size)
    bad = (out < low) | (out > high)
    while bad.any():
        out[bad] = rng.normal(0.0, std, int(bad.sum()))
        bad = (out < low) | (out > high)
    return out.reshape(shape).astype(dtype)


class Adam:
    """Adam with bias correction, decoupled weight decay and linear LR decay.

    ``total_steps`` sets the decay horizon: the learning rate used on the
    ``t``-th update (0-based) is ``lr * max(0, 1 - t / total_steps)``.
    """

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float = 1e-4,
        betas=(0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
        total_steps: int | None = None,
    ):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.total_steps = total_steps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def current_lr(self) -> float:
        if not self.total_steps:
            return self.lr
        return self.lr * max(0.0, 1.0 - self.step_count / self.total_steps)

    def step(self, grads: Mapping[str, np.ndarray] | None = None) -> None:
        """Apply one update; ``grads`` defaults to each parameter's ``.grad``."""
        lr = self.current_lr()
        self.step_count += 1
        t = self.step_count
        for name, p in self.params.items():
            g = p.grad if grads is None else grads.get(name)
            if g is None:
                raise ValueError(f"missing gradient for parameter {name!r}")
            if g.shape != p.shape:
                raise ShapeError("adam_step", p.shape, g.shape)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / (1.0 - self.beta1**t)
            vhat = v / (1.0 - self.beta2**t)
            update = mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data
            p.data = p.data - (lr * update).astype(p.dtype)

    def zero_grad(self) -> None:
        zero_grad(self.params.values())

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        for key in ("m", "v"):
            for name, arr in state[key].items():
                if name not in self.params or arr.shape != self.params[name].shape:
                    raise ValueError(f"optimizer state mismatch for {name!r}")
        self.step_count = int(state["step_count"])
        self.m = {k: np.array(state["m"][k], dtype=p.dtype) for k, p in self.params.items()}
        self.v = {k: np.array(state["v"][k], dtype=p.dtype) for k, p in self.params.items()}
