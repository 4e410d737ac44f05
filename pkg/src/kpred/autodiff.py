"""A small define-by-run reverse-mode autodiff over numpy arrays.

Each op returns a :class:`Tensor` that remembers its parents and a closure
that maps the output gradient to parent gradients. :func:`backward` sorts
the recorded graph topologically and replays the closures in reverse,
accumulating (never overwriting) gradients.

Broadcasting is deliberately limited to bias addition; every other op
demands matching shapes and raises :class:`ShapeError` otherwise.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np


class ShapeError(ValueError):
    pass


class GradientError(FloatingPointError):
    pass


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad=False, name=""):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = ()
        self.backward_fn = None
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

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return transpose(self)


def tensor(x, requires_grad=False, dtype=None, name=""):
    arr = np.array(x, dtype=dtype) if dtype is not None else np.asarray(x)
    return Tensor(arr, requires_grad=requires_grad, name=name)


def const(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else np.asarray(x))


def _node(data, parents, backward_fn, op):
    out = Tensor(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
    return out


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = const(a), const(b)
    _same_shape("add", a, b)
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = const(a), const(b)
    _same_shape("sub", a, b)
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a, b = const(a), const(b)
    _same_shape("mul", a, b)
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a, c: float):
    a = const(a)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_bias(x, b):
    """``x[..., j] + b[j]``; the single broadcasting op."""
    x, b = const(x), const(b)
    if b.ndim != 1 or x.shape[-1:] != b.shape:
        raise ShapeError(f"add_bias: bias {b.shape} does not match trailing dim of {x.shape}")
    axes = tuple(range(x.ndim - 1))
    return _node(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)), "add_bias")


def relu(x):
    x = const(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def abs_(x):
    x = const(x)
    sgn = np.sign(x.data)
    return _node(np.abs(x.data), (x,), lambda g: (g * sgn,), "abs")


def softmax(x):
    """Softmax over the last axis."""
    x = const(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _node(y, (x,), back, "softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalise the last axis, then scale and shift."""
    x, gain, bias = const(x), const(gain), const(bias)
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: gain {gain.shape}/bias {bias.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    axes = tuple(range(x.ndim - 1))

    def back(g):
        gx = g * gain.data
        n = x.shape[-1]
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / n)
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _node(xhat * gain.data + bias.data, (x, gain, bias), back, "layer_norm")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    """``a @ b`` for ``(..., n, k) @ (k, m)`` or matching leading dims."""
    a, b = const(a), const(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} and {b.shape}")
    if b.ndim > a.ndim:
        raise ShapeError(f"matmul: batch dims differ {a.shape} and {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _node(a.data @ b.data, (a, b), back, "matmul")


def transpose(x, axes=None):
    x = const(x)
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    inv = np.argsort(axes)
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(x, shape):
    x = const(x)
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def concat(xs, axis=-1):
    xs = [const(x) for x in xs]
    ax = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(x.shape[i] != xs[0].shape[i] for i in range(x.ndim) if i != ax):
            raise ShapeError(f"concat: shapes {[t.shape for t in xs]} disagree off axis {axis}")
    splits = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return _node(np.concatenate([x.data for x in xs], axis=ax), tuple(xs),
                 lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def index(x, idx):
    """Basic slicing (no fancy indexing; use :func:`gather_rows`)."""
    x = const(x)

    def back(g):
        out = np.zeros_like(x.data)
        out[idx] = g
        return (out,)

    return _node(x.data[idx], (x,), back, "index")


def gather_rows(x, idx):
    """``x[idx]`` along axis 0; the integer indices carry no gradient."""
    x = const(x)
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _node(x.data[idx], (x,), back, "gather_rows")


# ---------------------------------------------------------------- reductions

def sum_(x, axis=None):
    x = const(x)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).astype(x.dtype),)

    return _node(np.asarray(x.data.sum(axis=axis)), (x,), back, "sum")


def mean(x, axis=None):
    x = const(x)
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis), 1.0 / n)


def _arg_reduce(x, axis, pick, op):
    x = const(x)
    arg = np.expand_dims(pick(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, arg, axis=axis)

    def back(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, arg, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _node(np.squeeze(out, axis), (x,), back, op)


def max_(x, axis):
    """Max over ``axis``; the gradient goes to the first argmax only."""
    return _arg_reduce(x, axis, np.argmax, "max")


def min_(x, axis):
    return _arg_reduce(x, axis, np.argmin, "min")


# ---------------------------------------------------------------- distances

def sqdist(a, b):
    """Pairwise squared distances between rows of ``a`` (n, d) and ``b`` (m, d)."""
    a, b = const(a), const(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"sqdist: incompatible shapes {a.shape} and {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    d = np.einsum("ijk,ijk->ij", diff, diff)

    def back(g):
        ga = 2.0 * (a.data * g.sum(axis=1, keepdims=True) - g @ b.data)
        gb = 2.0 * (b.data * g.sum(axis=0)[:, None] - g.T @ a.data)
        return ga, gb

    return _node(d, (a, b), back, "sqdist")


def l1_rows(a, b):
    """Per-row L1 distance ``sum_j |a_ij - b_ij|``."""
    a, b = const(a), const(b)
    _same_shape("l1_rows", a, b)
    diff = a.data - b.data
    sgn = np.sign(diff)

    def back(g):
        gg = np.expand_dims(g, -1) * sgn
        return gg, -gg

    return _node(np.abs(diff).sum(axis=-1), (a, b), back, "l1_rows")


def unilateral_chamfer(a, b):
    """Mean over rows of ``a`` of the squared distance to the nearest row of ``b``."""
    return mean(min_(sqdist(a, b), axis=1))


def chamfer(a, b):
    d = sqdist(a, b)
    return add(mean(min_(d, axis=1)), mean(min_(d, axis=0)))


# ---------------------------------------------------------------- backward

def _toposort(root):
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, grad=None):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data) if grad is None else np.asarray(grad)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g.astype(node.dtype, copy=False)
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# ---------------------------------------------------------------- parameters

class ParamStore:
    """Named parameters plus Adam moments."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        self.steps[name] = 0
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def names(self, prefix=""):
        return [n for n in self.params if n.startswith(prefix)]

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def set_trainable(self, prefixes, trainable=True):
        for n, p in self.params.items():
            if any(n.startswith(pre) for pre in prefixes):
                p.requires_grad = trainable

    def trainable(self):
        return [n for n, p in self.params.items() if p.requires_grad]

    def astype(self, dtype):
        out = ParamStore(dtype)
        for n, p in self.params.items():
            out.add(n, p.data)
            out.params[n].requires_grad = p.requires_grad
        return out

    def copy(self):
        out = self.astype(self.dtype)
        out.m = {k: v.copy() for k, v in self.m.items()}
        out.v = {k: v.copy() for k, v in self.v.items()}
        out.steps = dict(self.steps)
        return out


def glorot(rng, fan_in, fan_out, dtype=np.float32):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out)).astype(dtype)


def clip_grad_norm(store: ParamStore, max_norm: float, names=None) -> float:
    names = store.trainable() if names is None else names
    total = float(np.sqrt(sum(float(np.sum(np.square(store[n].grad, dtype=np.float64)))
                              for n in names if store[n].grad is not None)))
    if max_norm and total > max_norm:
        f = max_norm / (total + 1e-12)
        for n in names:
            if store[n].grad is not None:
                store[n].grad *= f
    return total


def adam_step(store: ParamStore, lr, beta1=0.9, beta2=0.999, eps=1e-8, names=None):
    """One bias-corrected Adam update over trainable parameters; gradients are zeroed after.

    Step counts are kept per parameter so blocks trained in separate stages
    each start with fresh bias correction.
    """
    names = store.trainable() if names is None else names
    for n in names:
        g = store[n].grad
        if g is not None and not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient in parameter {n!r}")
    for n in names:
        store.steps[n] += 1
        t = store.steps[n]
        c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
        p = store[n]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = store.m[n] = beta1 * store.m[n] + (1.0 - beta1) * g
        v = store.v[n] = beta2 * store.v[n] + (1.0 - beta2) * g * g
        p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
        p.zero_grad()


def grad_check(f, params, eps=1e-5, n_coords=64, seed=0):
    """Largest relative error between analytic and central-difference gradients.

    ``f`` rebuilds the graph from ``params`` (a list of leaf tensors) and
    returns a scalar Tensor. Up to ``n_coords`` coordinates are sampled.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(f())
    analytic = [p.grad.copy() for p in params]
    coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    rng = np.random.default_rng(seed)
    if len(coords) > n_coords:
        coords = [coords[k] for k in rng.choice(len(coords), n_coords, replace=False)]
    worst = 0.0
    with no_grad():
        for i, j in coords:
            flat = params[i].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + eps
            fp = float(f().data)
            flat[j] = orig - eps
            fm = float(f().data)
            flat[j] = orig
            num = (fp - fm) / (2.0 * eps)
            ana = float(analytic[i].reshape(-1)[j])
            err = abs(num - ana) / max(abs(num), abs(ana), 1e-8)
            worst = max(worst, err)
    return worst
