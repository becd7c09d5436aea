"""Dense float64 tensors with a reverse-mode differentiation tape.

Every op builds a node holding its output array and a closure mapping the
output gradient to one gradient per input. ``Tensor.backward`` walks the
nodes in reverse topological order so each node's gradient is complete
before it is propagated.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PARTITIONS = ("phi", "theta_P", "theta_H")

_grad_enabled = True
# When not None, activation-pattern arrays are appended here (grad checking).
_pattern_log: list | None = None


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        desc = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class NumericalError(FloatingPointError):
    """Raised when a non-finite value shows up during differentiation."""


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def record_patterns():
    """Collect the activation patterns (ReLU signs, pool argmaxes) of a forward pass."""
    global _pattern_log
    prev = _pattern_log
    _pattern_log = []
    try:
        yield _pattern_log
    finally:
        _pattern_log = prev


def _log_pattern(arr):
    if _pattern_log is not None:
        _pattern_log.append(arr)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


class Tensor:
    """A float64 array that may take part in the differentiation tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self.op = "leaf"
        self.partition = None
        self._parents = ()
        self._grad_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate d(self)/d(node) into ``grad`` of every node on the tape."""
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
        if not np.isfinite(self.data).all():
            raise NumericalError(f"loss is not finite (node op={self.op})")
        order = _topo_order(self)
        for node in order:
            if node._grad_fn is not None:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._grad_fn is None or node.grad is None:
                continue
            pgrads = node._grad_fn(node.grad)
            for parent, g in zip(node._parents, pgrads):
                if g is None or not parent.requires_grad:
                    continue
                if not np.isfinite(g).all():
                    where = f"{node.op}" + (f" ({node.name})" if node.name else "")
                    raise NumericalError(f"non-finite gradient produced by node {where}")
                parent.grad = g if parent.grad is None else parent.grad + g

    # arithmetic sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A named tensor owned by a model, tagged with its partition.

    ``phi`` holds hypernetwork weights, ``theta_P`` the primary network's own
    weights, and ``theta_H`` records parameters produced by a hypernetwork.
    The latter are never trained or regularized directly.
    """

    def __init__(self, data, name, partition="theta_P", trainable=None, regularized=None):
        if partition not in PARTITIONS:
            raise ValueError(f"unknown partition {partition!r}")
        generated = partition == "theta_H"
        trainable = (not generated) if trainable is None else trainable
        regularized = (not generated) if regularized is None else regularized
        if generated and (trainable or regularized):
            raise ValueError(f"{name}: theta_H parameters cannot be trainable or regularized")
        super().__init__(data, requires_grad=trainable, name=name)
        self.partition = partition
        self.trainable = trainable
        self.regularized = regularized

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, partition={self.partition})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, grad_fn, op):
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss):
    """Fresh gradients of ``loss``; return ``{name: grad}`` for trainable parameters reached.

    Unlike :meth:`Tensor.backward`, leaf gradients from earlier calls are cleared first.
    """
    order = _topo_order(loss)
    for node in order:
        node.grad = None
    loss.backward()
    grads = {}
    for node in order:
        if isinstance(node, Parameter) and node.trainable and node.grad is not None:
            grads[node.name] = node.grad
    return grads


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), grad_fn, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def grad_fn(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), grad_fn, "div")


def power(a, p):
    a = as_tensor(a)
    p = float(p)

    def grad_fn(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(a.data**p, (a,), grad_fn, "pow")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clamp_min(a, floor):
    """max(a, floor); the gradient is zero where the floor is active."""
    a = as_tensor(a)
    keep = a.data >= floor
    return _make(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,), "clamp_min")


def relu(a):
    a = as_tensor(a)
    pos = a.data > 0
    _log_pattern(pos)
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def prelu(a, slope):
    """Parametric ReLU with one learnable slope per channel (axis 1) or a shared one."""
    a, slope = as_tensor(a), as_tensor(slope)
    if a.ndim < 2:
        raise ShapeError("prelu", a.shape, slope.shape)
    n = slope.data.size
    if n != 1 and n != a.shape[1]:
        raise ShapeError("prelu", a.shape, slope.shape)
    bshape = (1, n) + (1,) * (a.ndim - 2)
    s = slope.data.reshape(bshape)
    pos = a.data > 0
    _log_pattern(pos)

    def grad_fn(g):
        ga = g * np.where(pos, 1.0, s)
        gs = (g * np.where(pos, 0.0, a.data)).sum(axis=tuple(i for i in range(a.ndim) if i != 1))
        if n == 1:
            gs = gs.sum(keepdims=True)
        return ga, gs.reshape(slope.shape)

    return _make(np.where(pos, a.data, s * a.data), (a, slope), grad_fn, "prelu")


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), grad_fn, "softmax")


def dropout(a, p, training, rng):
    """Inverted dropout; identity in eval mode."""
    a = as_tensor(a)
    if not training or p <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "dropout")


# ---------------------------------------------------------------- reductions / shape


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), grad_fn, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if a.size == 0:
        raise ShapeError("mean", a.shape)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors, axis=-1):
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts]) from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, ts, grad_fn, "concat")


def index(a, idx):
    a = as_tensor(a)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), grad_fn, "index")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), grad_fn, "matmul")


def linear(x, w, b=None):
    """Affine map of a batch ``x`` (B, in).

    ``w`` is either shared (out, in) or per-sample (B, out, in); ``b`` is
    (out,) or (B, out) correspondingly.
    """
    x, w = as_tensor(x), as_tensor(w)
    per_sample = w.ndim == 3
    if x.ndim != 2 or w.shape[-1] != x.shape[1] or (per_sample and w.shape[0] != x.shape[0]):
        raise ShapeError("linear", x.shape, w.shape)
    if per_sample:
        out = np.matmul(w.data, x.data[:, :, None])[:, :, 0]
    else:
        out = x.data @ w.data.T
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape[-1] != w.shape[-2] or (b.ndim == 2 and b.shape[0] != x.shape[0]):
            raise ShapeError("linear", w.shape, b.shape)
        out = out + b.data
        parents.append(b)

    def grad_fn(g):
        if per_sample:
            gx = np.matmul(g[:, None, :], w.data)[:, 0, :]
            gw = g[:, :, None] * x.data[:, None, :]
        else:
            gx = g @ w.data
            gw = g.T @ x.data
        if b is None:
            return gx, gw
        gb = g if b.ndim == 2 else g.sum(axis=0)
        return gx, gw, gb

    return _make(out, parents, grad_fn, "linear")


# ---------------------------------------------------------------- convolution / pooling


def _im2col(x, kh, kw, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * kh * kw)
    return cols, ho, wo


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D cross-correlation of x (B, Cin, H, W).

    ``w`` is shared (Cout, Cin, kh, kw) or per-sample (B, Cout, Cin, kh, kw);
    ``b`` is (Cout,) or (B, Cout).
    """
    x, w = as_tensor(x), as_tensor(w)
    per_sample = w.ndim == 5
    if x.ndim != 4 or w.ndim not in (4, 5) or w.shape[-3] != x.shape[1] or (
        per_sample and w.shape[0] != x.shape[0]
    ):
        raise ShapeError("conv2d", x.shape, w.shape)
    n, cin, h, wd = x.shape
    cout, kh, kw = w.shape[-4], w.shape[-2], w.shape[-1]
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError("conv2d", x.shape, w.shape)
    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    if per_sample:
        wmat = w.data.reshape(n, cout, -1)
        out = np.matmul(cols, wmat.transpose(0, 2, 1))
    else:
        wmat = w.data.reshape(cout, -1)
        out = (cols.reshape(-1, cols.shape[-1]) @ wmat.T).reshape(n, ho * wo, cout)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape[-1] != cout or (b.ndim == 2 and b.shape[0] != n):
            raise ShapeError("conv2d", w.shape, b.shape)
        out = out + (b.data[:, None, :] if b.ndim == 2 else b.data)
        parents.append(b)
    out = out.transpose(0, 2, 1).reshape(n, cout, ho, wo)

    def grad_fn(g):
        gm = g.reshape(n, cout, ho * wo).transpose(0, 2, 1)
        if per_sample:
            gw = np.matmul(gm.transpose(0, 2, 1), cols).reshape(w.shape)
            dcols = np.matmul(gm, wmat)
        else:
            gm2 = gm.reshape(-1, cout)
            gw = (gm2.T @ cols.reshape(-1, cols.shape[-1])).reshape(w.shape)
            dcols = gm2 @ wmat
        dcols = np.ascontiguousarray(dcols.reshape(n, ho, wo, cin, kh, kw).transpose(0, 3, 4, 5, 1, 2))
        hp, wp = h + 2 * padding, wd + 2 * padding
        dx = np.zeros((n, cin, hp, wp))
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
        if padding:
            dx = dx[:, :, padding:-padding, padding:-padding]
        grads = [dx, gw]
        if b is not None:
            gb = gm.sum(axis=1)
            grads.append(gb if b.ndim == 2 else gb.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, grad_fn, "conv2d")


def max_pool2d(x, k=2):
    """Non-overlapping k x k max pooling; trailing rows/cols that do not fill a window are dropped."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] < k or x.shape[3] < k:
        raise ShapeError("max_pool2d", x.shape, (k, k))
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    xc = x.data[:, :, : ho * k, : wo * k]
    win = xc.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    _log_pattern(arg)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        gw = np.zeros((n, c, ho, wo, k * k))
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros((n, c, h, w))
        gx[:, :, : ho * k, : wo * k] = (
            gw.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
        )
        return (gx,)

    return _make(out, (x,), grad_fn, "max_pool2d")


def global_avg_pool2d(x):
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("global_avg_pool2d", x.shape)
    n, c, h, w = x.shape
    return _make(
        x.data.mean(axis=(2, 3)),
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),),
        "global_avg_pool2d",
    )


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Batch normalization over all axes but 1.

    In training mode batch statistics are used and the running buffers are
    updated in place; in eval mode the running buffers are used, which makes
    the op a fixed affine map.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim not in (2, 4) or gamma.shape != (x.shape[1],) or beta.shape != gamma.shape:
        raise ShapeError("batch_norm", x.shape, gamma.shape)
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    if training:
        m = x.size // x.shape[1]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        unbiased = var * m / max(m - 1, 1)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    g_ = gamma.data.reshape(bshape)
    out = xhat * g_ + beta.data.reshape(bshape)

    def grad_fn(gr):
        ggamma = (gr * xhat).sum(axis=axes)
        gbeta = gr.sum(axis=axes)
        dxhat = gr * g_
        if training:
            m = x.size // x.shape[1]
            dx = (
                inv.reshape(bshape)
                / m
                * (
                    m * dxhat
                    - dxhat.sum(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
                )
            )
        else:
            dx = dxhat * inv.reshape(bshape)
        return dx, ggamma, gbeta

    return _make(out, (x, gamma, beta), grad_fn, "batch_norm")


_CATALOG = frozenset(
    {
        "add", "sub", "mul", "div", "pow", "exp", "log", "clamp_min",
        "relu", "prelu", "softmax", "dropout",
        "sum", "mean", "reshape", "transpose", "concat", "index",
        "matmul", "linear", "conv2d", "max_pool2d", "global_avg_pool2d", "batch_norm",
    }
)


def op_catalog():
    """Names of the differentiable ops provided here."""
    return _CATALOG


# ---------------------------------------------------------------- gradient checking


class NonDifferentiableError(RuntimeError):
    """Grad check kept landing on a kink (ReLU sign flip or pool argmax change)."""


def _same_patterns(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(
    loss_fn: Callable[..., Tensor],
    params: Iterable[Parameter],
    inputs: Sequence[np.ndarray] = (),
    eps: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
    retries: int = 3,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(*inputs)`` must rebuild the graph on every call and return a
    scalar. Non-trainable parameters are skipped. With ``max_entries`` set,
    that many randomly chosen entries of each parameter are probed. If a
    perturbation changes an activation pattern the point is treated as a kink
    and the inputs are jittered; after ``retries`` jitters the check gives up.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    params = [p for p in params if getattr(p, "trainable", True)]
    rng = np.random.default_rng(seed)
    inputs = [np.array(a, dtype=np.float64, copy=True) for a in inputs]
    for attempt in range(retries + 1):
        err = _grad_check_once(loss_fn, params, inputs, eps, max_entries, rng)
        if err is not None:
            return err
        if attempt == retries:
            break
        for a in inputs:
            scale = a.std() if a.size > 1 and a.std() > 0 else 1.0
            a += 1e-3 * scale * rng.standard_normal(a.shape)
    raise NonDifferentiableError(f"non-differentiable point persisted after {retries} jittered retries")


def _grad_check_once(loss_fn, params, inputs, eps, max_entries, rng):
    for p in params:
        p.grad = None
    with record_patterns() as base:
        loss = loss_fn(*inputs)
    loss.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            picks = rng.choice(flat.size, size=max_entries, replace=False)
        else:
            picks = range(flat.size)
        for i in picks:
            orig = flat[i]
            vals = []
            for sign in (1.0, -1.0):
                flat[i] = orig + sign * eps
                with no_grad(), record_patterns() as pat:
                    vals.append(loss_fn(*inputs).item())
                if not _same_patterns(base, pat):
                    flat[i] = orig
                    return None
            flat[i] = orig
            num = (vals[0] - vals[1]) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            rel = abs(a - num) / max(abs(a), abs(num), 1e-12)
            worst = max(worst, rel)
    return worst
