"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable operation creates a node holding references to its
parents and a closure mapping the output gradient to parent gradients.  A
backward pass collects the reachable graph into a :class:`Tape` ordered by
creation, then walks it in reverse, so each node is visited exactly once.

Arrays are float64 unless :func:`set_default_dtype` switches to float32.
"""

import itertools

import numpy as np

from .exceptions import (
    ConfigError,
    DimensionError,
    EmptyUtteranceError,
    LabelIndexError,
    NonFiniteError,
    StateError,
)

_ids = itertools.count()
_dtype = np.float64

#: Raise NonFiniteError as soon as any forward op yields NaN or Inf.
CHECK_FINITE = True


def set_default_dtype(dtype):
    global _dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ConfigError(f"unsupported dtype {dtype}")
    _dtype = dtype.type


def get_default_dtype():
    return _dtype


class Tensor:
    """An n-dimensional array that can take part in gradient computation."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.array(data, dtype=dtype or _dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents = ()
        self._backward = None
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def backward(self, grad=None):
        backward(self, grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _result(data, parents, backward_fn, op, check=True):
    # ops that only move or mask finite values skip the check (check=False)
    if check and CHECK_FINITE and not np.isfinite(np.sum(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._id = next(_ids)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tape:
    """Nodes reachable from a root, in creation order.

    ``nodes[k]`` is a tensor and ``parents[k]`` holds, for each of its
    parents, the tape index (always smaller than ``k``) or None when that
    parent does not require a gradient.
    """

    def __init__(self, root):
        seen = {}
        stack = [root]
        while stack:
            node = stack.pop()
            if node._id in seen or not node.requires_grad:
                continue
            seen[node._id] = node
            stack.extend(node._parents)
        self.nodes = [seen[k] for k in sorted(seen)]
        position = {node._id: k for k, node in enumerate(self.nodes)}
        self.parents = [tuple(position.get(p._id) for p in node._parents) for node in self.nodes]

    def __len__(self):
        return len(self.nodes)

    def ops(self):
        return [node.op for node in self.nodes]


def backward(loss, grad=None):
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate across calls until zeroed.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = Tape(loss)
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.data.dtype)
    grads = {len(tape) - 1: seed}
    for k in range(len(tape) - 1, -1, -1):
        g = grads.pop(k, None)
        if g is None:
            continue
        node = tape.nodes[k]
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for pos, pg in zip(tape.parents[k], node._backward(g)):
            if pos is None or pg is None:
                continue
            grads[pos] = grads[pos] + pg if pos in grads else pg


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        "sub",
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.data, b.data
    return _result(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        "mul",
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):  # _result raises NonFiniteError instead
        out = av / bv
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
        "div",
    )


def activation(x, negative_slope=0.0):
    """Leaky rectifier ``max(x, slope * x)``; slope 0 is the plain ReLU."""
    if not 0.0 <= negative_slope < 1.0:
        raise ConfigError(f"negative_slope must lie in [0, 1), got {negative_slope}")
    x = as_tensor(x)
    xv = x.data
    if negative_slope == 0.0:
        out = np.maximum(xv, 0.0)
        return _result(out, (x,), lambda g: (np.where(xv > 0, g, 0.0),), "activation", check=False)
    out = np.maximum(xv, negative_slope * xv)
    return _result(out, (x,), lambda g: (np.where(xv > 0, g, negative_slope * g),), "activation",
                   check=False)


def relu(x):
    return activation(x, 0.0)


def leaky_relu(x, negative_slope=0.01):
    return activation(x, negative_slope)


def dropout(x, p, rng, training=True):
    """Inverted dropout: zero with probability ``p``, scale survivors by 1/(1-p)."""
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------- reductions

def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), back, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- shape ops

def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape", check=False)


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(
        np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose"
    )


def swapaxes(x, a, b):
    axes = list(range(as_tensor(x).ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, tuple(axes))


def index(x, key):
    x = as_tensor(x)
    shape, dtype = x.shape, x.data.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, key, g)
        return (full,)

    return _result(x.data[key], (x,), back, "index", check=False)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
        "concat",
        check=False,
    )


def stack(tensors, axis=0):
    return concat([reshape(t, _expand(t.shape, axis)) for t in map(as_tensor, tensors)], axis)


def _expand(shape, axis):
    shape = list(shape)
    shape.insert(axis if axis >= 0 else len(shape) + 1 + axis, 1)
    return tuple(shape)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    """Matrix product over the last two axes, batched over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    av, bv = a.data, b.data
    if bv.ndim == 2:
        # (..., m, k) @ (k, n): fold leading axes into one GEMM
        flat = av.reshape(-1, av.shape[-1])
        out = (flat @ bv).reshape(av.shape[:-1] + (bv.shape[1],))

        def back_2d(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bv.T).reshape(av.shape)
            return ga, flat.T @ g2

        return _result(out, (a, b), back_2d, "matmul")

    def back(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _result(av @ bv, (a, b), back, "matmul")


def softmax_rows(x, mask=None):
    """Softmax along the last axis with per-row max subtraction.

    ``mask`` (broadcastable booleans, True = keep) forces excluded entries to
    probability zero; every row must keep at least one entry.
    """
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, z.shape)
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _result(y, (x,), back, "softmax")


softmax = softmax_rows


# ---------------------------------------------------------------- normalization

def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1,
               eps=1e-5, mask=None, fitted=True):
    """Per-channel batch normalization over every axis but the last.

    In training mode statistics come from the batch (restricted to positions
    where ``mask`` is True) and the numpy arrays ``running_mean`` and
    ``running_var`` are updated in place by an exponential moving average.
    Evaluation mode uses the running statistics and requires ``fitted``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xv = x.data
    channels = xv.shape[-1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise DimensionError(f"batch_norm: {channels} channels vs scale {gamma.shape}, shift {beta.shape}")
    if not training:
        if not fitted:
            raise StateError("batch_norm in eval mode before running statistics were fitted")
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (xv - running_mean) * inv
        gv = gamma.data

        def back_eval(g):
            axes = tuple(range(xv.ndim - 1))
            return g * gv * inv, np.sum(g * xhat, axis=axes), np.sum(g, axis=axes)

        return _result(xhat * gv + beta.data, (x, gamma, beta), back_eval, "batch_norm")

    flat = xv.reshape(-1, channels)
    if mask is None:
        w = None
        n = flat.shape[0]
        mu = flat.mean(axis=0)
    else:
        w = np.broadcast_to(mask, xv.shape[:-1]).reshape(-1, 1).astype(xv.dtype)
        n = w.sum()
        if n == 0:
            raise EmptyUtteranceError("batch_norm received no unmasked positions")
        mu = (w * flat).sum(axis=0) / n
    xhat = flat - mu
    if w is None:
        var = np.einsum("ij,ij->j", xhat, xhat) / n
    else:
        var = np.einsum("ij,ij->j", w * xhat, xhat) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat *= inv
    gv = gamma.data
    out = xhat * gv
    out += beta.data
    out = out.reshape(xv.shape)

    unbiased = var * n / (n - 1) if n > 1 else var
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu
    running_var *= 1.0 - momentum
    running_var += momentum * unbiased

    def back(g):
        g = g.reshape(-1, channels)
        gxhat = g * gv
        s1 = gxhat.sum(axis=0)
        s2 = np.einsum("ij,ij->j", gxhat, xhat)
        if w is None:
            dx = gxhat - (s1 + xhat * s2) / n
        else:
            dx = gxhat - w * (s1 + xhat * s2) / n
        dx *= inv
        return dx.reshape(xv.shape), np.einsum("ij,ij->j", g, xhat), g.sum(axis=0)

    return _result(out, (x, gamma, beta), back, "batch_norm")


def stats_pool(x, eps=1e-10, axis=-2):
    """Concatenate the mean and standard deviation over ``axis``.

    The deviation uses the population variance with ``eps`` inside the
    square root.  The pooled axis disappears and the two statistics are
    joined along the last remaining axis, so ``(B, T, C) -> (B, 2C)`` and,
    with ``axis=-1``, ``(C, T) -> (2C,)``.
    """
    x = as_tensor(x)
    xv = x.data
    axis = axis % xv.ndim
    T = xv.shape[axis]
    if T == 0:
        raise EmptyUtteranceError("stats_pool over an empty sequence")
    mu = xv.mean(axis=axis, keepdims=True)
    centered = xv - mu
    std = np.sqrt((centered * centered).mean(axis=axis, keepdims=True) + eps)
    out = np.concatenate([np.squeeze(mu, axis), np.squeeze(std, axis)], axis=-1)
    C = out.shape[-1] // 2

    def back(g):
        gm = np.expand_dims(g[..., :C], axis)
        gs = np.expand_dims(g[..., C:], axis)
        return (np.broadcast_to(gm / T, xv.shape) + gs * centered / (T * std),)

    return _result(out, (x,), back, "stats_pool")


# ---------------------------------------------------------------- losses

def log_softmax(x):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(out)
    return _result(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),), "log_softmax")


def cross_entropy_logits(logits, labels):
    """Mean negative log posterior of ``labels`` under softmax(``logits``)."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy_logits expects (batch, classes), got {logits.shape}")
    labels = np.asarray(labels)
    B, C = logits.shape
    if labels.shape != (B,):
        raise DimensionError(f"{B} logit rows but labels of shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise LabelIndexError(f"labels must lie in [0, {C}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()

    def back(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / B),)

    return _result(np.asarray(loss, dtype=logits.data.dtype), (logits,), back, "cross_entropy")
