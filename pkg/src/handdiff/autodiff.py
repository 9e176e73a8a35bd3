"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the primitives the networks need are provided.  Broadcasting is
limited to :func:`bias_add`; everything else requires matching shapes and
explicit :func:`reshape` / :func:`gather` calls, so each node in the graph
has a short, checkable backward rule.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from handdiff import kernels

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when an op receives incompatible shapes."""


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, op="leaf"):
        data = np.asarray(data, dtype=np.float64)
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(data, op):
    total = data.sum()
    if not math.isfinite(total) and not np.isfinite(data).all():
        raise FloatingPointError(f"{op}: produced non-finite values")


def _node(data, parents, backward, op, check=True):
    """Wrap ``data`` as the output of ``op``; ``backward(g)`` returns one
    gradient (or None) per parent.  Ops that only move or clip values pass
    ``check=False`` since they cannot create non-finite numbers."""
    if check:
        _check_finite(data, op)
    out = Tensor(data, op=op)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu", check=False)


def bias_add(x, b):
    """``x + b`` where ``b`` matches the trailing dims of ``x``."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
        raise ShapeError(f"bias_add: bias {b.shape} does not match trailing dims of {x.shape}")
    lead = x.ndim - b.ndim

    def backward(g):
        return g, g.reshape((-1,) + b.shape).sum(axis=0) if lead else g

    return _node(x.data + b.data, (x, b), backward, "bias_add")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    """``(n, k) @ (k, m)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _node(ad @ bd, (a, b), backward, "matmul")


def dense(x, w, b=None, relu=False, row_stable=False):
    """Fused ``x @ w + b`` (optionally followed by ReLU) for 2D ``x``.

    BLAS may round a row differently depending on where it sits in ``x``
    (narrow outputs take other kernel paths).  ``row_stable=True`` computes
    the forward product with a plain loop so every row's result depends only
    on that row; use it for small matrices where exact equivariance matters.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: cannot multiply {x.shape} by {w.shape}")
    parents = (x, w)
    y = np.einsum("ij,jk->ik", x.data, w.data) if row_stable else x.data @ w.data
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"dense: bias {b.shape} does not match output width {w.shape[1]}")
        y += b.data
        parents = (x, w, b)
    if relu:
        np.maximum(y, 0.0, out=y)
    xd, wd = x.data, w.data

    def backward(g):
        if relu:
            g = g * (y > 0)
        out = [g @ wd.T if x.requires_grad else None, xd.T @ g if w.requires_grad else None]
        if b is not None:
            out.append(np.ones(g.shape[0]) @ g if b.requires_grad else None)
        return out

    return _node(y, parents, backward, "dense")


def linear(x, w, b=None, relu=False, row_stable=False):
    """Row-wise affine map over the last axis of ``x`` (any leading shape)."""
    x = as_tensor(x)
    lead = x.shape[:-1]
    y = dense(reshape(x, (-1, x.shape[-1])), w, b, relu, row_stable)
    return reshape(y, lead + (y.shape[-1],))


def channel_graph(adj, x):
    """Channel-wise graph aggregation: ``out[b, j, c] = sum_k adj[j, k, c] * x[b, k, c]``."""
    adj, x = as_tensor(adj), as_tensor(x)
    if adj.ndim != 3 or x.ndim != 3 or adj.shape[0] != adj.shape[1] \
            or adj.shape[1:] != x.shape[1:]:
        raise ShapeError(f"channel_graph: adjacency {adj.shape} incompatible with {x.shape}")
    ad, xd = adj.data, x.data
    out = np.einsum("jkc,bkc->bjc", ad, xd)

    def backward(g):
        ga = np.einsum("bjc,bkc->jkc", g, xd) if adj.requires_grad else None
        gx = np.einsum("jkc,bjc->bkc", ad, g) if x.requires_grad else None
        return ga, gx

    return _node(out, (adj, x), backward, "channel_graph")


# ---------------------------------------------------------------- structure


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from exc
    return _node(data, (x,), lambda g: (g.reshape(old),), "reshape", check=False)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != \
                tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ShapeError(f"concat: shapes {[u.shape for u in tensors]} differ off axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _node(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward,
                 "concat", check=False)


def gather(x, idx):
    """Rows of ``x`` (first axis) selected by an integer index array of any shape."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"gather: index out of range for {x.shape[0]} rows")
    tail = x.shape[1:]

    def backward(g):
        width = int(np.prod(tail)) if tail else 1
        acc = np.zeros((x.shape[0], width))
        kernels.scatter_add_rows(acc, idx.reshape(-1), g.reshape(-1, width))
        return (acc.reshape(x.shape),)

    return _node(x.data[idx], (x,), backward, "gather", check=False)


def max_pool(x, axis):
    """Max over ``axis``; the gradient goes to the first maximal element."""
    x = as_tensor(x)
    ax = axis % x.ndim
    shape = x.shape
    K = shape[ax]
    if K == 0:
        raise ShapeError("max_pool: empty pooling axis")
    lead, tail = int(np.prod(shape[:ax])), int(np.prod(shape[ax + 1:]))
    out, arg = kernels.max_pool_mid(x.data.reshape(lead, K, tail))
    out_shape = shape[:ax] + shape[ax + 1:]

    def backward(g):
        return (kernels.max_pool_mid_backward(g.reshape(lead, tail), arg, K).reshape(shape),)

    return _node(out.reshape(out_shape), (x,), backward, "max_pool", check=False)


# ---------------------------------------------------------------- reductions


def sum_all(x):
    x = as_tensor(x)
    shape = x.shape
    return _node(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def mean_all(x):
    x = as_tensor(x)
    n = x.data.size
    return scale(sum_all(x), 1.0 / n)


def smooth_l1(x, knee=0.01):
    """Sum over all elements of ``0.5/knee * x**2`` inside ``|x| < knee`` and
    ``|x| - knee/2`` outside (knee 0.01 gives ``50 x**2`` / ``|x| - 0.005``)."""
    x = as_tensor(x)
    xd = x.data
    inner = np.abs(xd) < knee
    vals = np.where(inner, (0.5 / knee) * xd * xd, np.abs(xd) - 0.5 * knee)

    def backward(g):
        return (float(g) * np.where(inner, xd / knee, np.sign(xd)),)

    return _node(np.asarray(vals.sum()), (x,), backward, "smooth_l1")


# ---------------------------------------------------------------- convolution


def _pad_hw(a, pad):
    if pad == 0:
        return a
    return np.pad(a, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def conv2d(x, w, b=None, stride=1, pad=1):
    """2D convolution on channels-last input ``(B, H, W, Cin)`` with kernel
    ``(kh, kw, Cin, Cout)``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride {stride} not supported")
    B, H, W, cin = x.shape
    kh, kw, _, cout = w.shape
    xp = _pad_hw(x.data, pad)
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv2d: kernel {w.shape[:2]} larger than padded input {xp.shape[1:3]}")
    sb, sh, sw, sc = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp, (B, Ho, Wo, kh, kw, cin), (sb, sh * stride, sw * stride, sh, sw, sc), writeable=False
    ).reshape(B * Ho * Wo, kh * kw * cin)
    wd = w.data
    out = (cols @ wd.reshape(-1, cout)).reshape(B, Ho, Wo, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(wd.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wd.reshape(-1, cout).T).reshape(B, Ho, Wo, kh, kw, cin)
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, pad:pad + H, pad:pad + W, :] if pad else gxp
        return gx, gw

    y = _node(out, (x, w), backward, "conv2d")
    if b is not None:
        y = bias_add(y, b)
    return y


# ---------------------------------------------------------------- backward pass


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf reachable
    from ``loss``.  Intermediate nodes do not keep gradients."""
    if loss.data.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order, seen = [], set()
    stack = [(loss, False)]
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
    grads = {id(loss): np.ones(())}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = gp if key not in grads else grads[key] + gp
