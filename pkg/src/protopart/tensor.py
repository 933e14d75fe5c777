"""Dense float64 tensors with a reverse-mode gradient tape.

Only the operations the network needs are provided.  Image-like tensors are
channels-last (``H x W x C``); every spatial op also accepts a leading batch
axis (``N x H x W x C``) so a minibatch costs one vectorised pass.

Recording only happens inside an active :class:`Tape`::

    with Tape() as tape:
        loss = softmax_cross_entropy(linear(x, w), 0)
        tape.backward(loss)
    w.grad  # dloss/dw

Outside a tape every op is a plain forward evaluation.
"""

import itertools
from contextvars import ContextVar

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .exceptions import InvalidArgumentError, InvalidShapeError

_ACTIVE_TAPE = ContextVar("protopart_active_tape", default=None)
_TAPE_IDS = itertools.count(1)


class Tensor:
    """A float64 array with an optional gradient slot.

    ``requires_grad`` marks a leaf whose gradient should be accumulated into
    ``grad`` by :meth:`Tape.backward`.  ``tape_id`` identifies the tape (and
    node) that produced the tensor, or is ``None`` for leaves.
    """

    __slots__ = ("values", "requires_grad", "grad", "_tape", "_generation", "_index")

    def __init__(self, values, requires_grad=False):
        values = np.asarray(values, dtype=np.float64)
        if not values.flags.c_contiguous:
            values = np.ascontiguousarray(values)
        self.values = values
        self.requires_grad = requires_grad
        self.grad = None
        self._tape = None
        self._generation = None
        self._index = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    @property
    def tape_id(self):
        if self._tape is None:
            return None
        return (self._tape.id, self._index)

    def numpy(self):
        return self.values

    def item(self):
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else self.values.item()

    def detach(self):
        return Tensor(self.values.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return multiply(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


def _as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of the operations evaluated while it is active.

    Nodes are appended in evaluation order, so the list is already
    topologically sorted.  A tape supports a single :meth:`backward`; call
    :meth:`reset` before recording the next step.
    """

    def __init__(self):
        self.id = next(_TAPE_IDS)
        self._nodes = []
        self._generation = 0
        self._consumed = False
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self._nodes)

    def reset(self):
        self._nodes = []
        self._generation += 1
        self._consumed = False

    def record(self, out, parents, backward_fn):
        out.requires_grad = True
        out._tape = self
        out._generation = self._generation
        out._index = len(self._nodes)
        self._nodes.append(_Node(out, parents, backward_fn))
        return out

    def owns(self, tensor):
        return tensor._tape is self and tensor._generation == self._generation

    def backward(self, loss):
        if loss.size != 1:
            raise InvalidArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.owns(loss):
            raise InvalidArgumentError("loss was not recorded on this tape")
        if self._consumed:
            raise InvalidArgumentError("backward already ran on this tape; reset it first")
        self._consumed = True

        pending = {loss._index: np.ones_like(loss.values)}
        leaves = {}
        for index in range(loss._index, -1, -1):
            g = pending.pop(index, None)
            if g is None:
                continue
            node = self._nodes[index]
            node.out.grad = g if node.out.grad is None else node.out.grad + g
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if self.owns(parent):
                    prev = pending.get(parent._index)
                    pending[parent._index] = pg if prev is None else prev + pg
                else:
                    key = id(parent)
                    if key in leaves:
                        leaves[key] = (parent, leaves[key][1] + pg)
                    else:
                        leaves[key] = (parent, pg)
        for parent, g in leaves.values():
            g = np.asarray(g, dtype=np.float64).reshape(parent.shape)
            parent.grad = g if parent.grad is None else parent.grad + g


def active_tape():
    return _ACTIVE_TAPE.get()


def backward(loss):
    """Populate ``grad`` on every tracked ancestor of the scalar ``loss``."""
    if loss.size != 1:
        raise InvalidArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise InvalidArgumentError("loss is not on any gradient tape")
    loss._tape.backward(loss)


def _result(values, parents, backward_fn):
    out = Tensor(values)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(out, parents, backward_fn)
    return out


def _batched(x, spatial_ndim=3):
    """Return (4-d view, had_batch_axis)."""
    if x.ndim == spatial_ndim:
        return x[None], False
    if x.ndim == spatial_ndim + 1:
        return x, True
    raise InvalidShapeError(f"expected a {spatial_ndim}-d or batched tensor, got shape {x.shape}")


# ---------------------------------------------------------------- arithmetic


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and b.size != 1 and a.size != 1:
        raise InvalidShapeError(f"cannot add shapes {a.shape} and {b.shape}")
    out = a.values + b.values

    def bwd(g):
        ga = g if a.size == g.size else np.sum(g)
        gb = g if b.size == g.size else np.sum(g)
        return ga, gb

    return _result(out, (a, b), bwd)


def scale(a, factor):
    return _result(a.values * factor, (a,), lambda g: (g * factor,))


def multiply(a, b):
    if a.shape != b.shape:
        raise InvalidShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return _result(a.values * b.values, (a, b), lambda g: (g * b.values, g * a.values))


def reshape(a, shape):
    shape = tuple(shape)
    return _result(a.values.reshape(shape), (a,), lambda g: (np.reshape(g, a.shape),))


def tsum(a, axis=None):
    out = np.sum(a.values, axis=axis)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _result(out, (a,), bwd)


def mean(a, axis=None):
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(tsum(a, axis), 1.0 / count)


def add_bias(x, bias):
    """Add a length-C vector along the last axis of ``x``."""
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise InvalidShapeError(f"bias {bias.shape} does not match trailing axis of {x.shape}")
    axes = tuple(range(x.ndim - 1))
    return _result(x.values + bias.values, (x, bias), lambda g: (g, g.sum(axis=axes)))


def square(a):
    return _result(a.values**2, (a,), lambda g: (2.0 * g * a.values,))


# ---------------------------------------------------------------- elementwise


def relu(x):
    mask = x.values > 0
    return _result(np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x):
    s = expit(x.values)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def elementwise(x, kind):
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise InvalidArgumentError(f"unknown elementwise kind {kind!r}")


def log_activation(d2, epsilon):
    """Elementwise ``log((d2 + 1) / (d2 + epsilon))`` for squared distances."""
    v = d2.values
    out = np.log1p((1.0 - epsilon) / (v + epsilon))
    return _result(out, (d2,), lambda g: (g * (1.0 / (v + 1.0) - 1.0 / (v + epsilon)),))


# ---------------------------------------------------------------- convolution


def _windows(x4, kh, kw, stride):
    # N, H', W', C, kh, kw
    return sliding_window_view(x4, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]


def _scatter_windows(grad_cols, shape, stride):
    """Adjoint of :func:`_windows`; grad_cols is N, H', W', kh, kw, C."""
    n, ho, wo, kh, kw, _ = grad_cols.shape
    out = np.zeros(shape)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :] += grad_cols[
                :, :, :, i, j, :
            ]
    return out


def conv2d(x, filters, stride=1, padding=0, bias=None):
    """Cross-correlation of ``x`` (H x W x C_in) with ``filters`` (kh x kw x C_in x C_out)."""
    if stride < 1 or padding < 0:
        raise InvalidArgumentError("stride must be positive and padding non-negative")
    x4, batched = _batched(x.values)
    if filters.ndim != 4:
        raise InvalidShapeError(f"filters must be 4-d, got shape {filters.shape}")
    kh, kw, cin, cout = filters.shape
    if x4.shape[3] != cin:
        raise InvalidShapeError(f"filter depth {cin} does not match input channels {x4.shape[3]}")
    if kh > x4.shape[1] + 2 * padding or kw > x4.shape[2] + 2 * padding:
        raise InvalidShapeError(f"kernel {kh}x{kw} larger than padded input {x4.shape[1:3]}")
    if bias is not None and bias.shape != (cout,):
        raise InvalidShapeError(f"bias must have shape ({cout},), got {bias.shape}")
    w = filters.values
    xp = np.pad(x4, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x4
    cols = _windows(xp, kh, kw, stride)
    out = np.tensordot(cols, w, axes=([4, 5, 3], [0, 1, 2]))
    if bias is not None:
        out = out + bias.values
    if not batched:
        out = out[0]

    def bwd(g):
        g4 = g if batched else g[None]
        gw = np.tensordot(cols, g4, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
        gx = None
        if x.requires_grad:
            gcols = np.tensordot(g4, w, axes=([3], [3]))
            gxp = _scatter_windows(gcols, xp.shape, stride)
            if padding:
                gxp = gxp[:, padding:-padding, padding:-padding, :]
            gx = gxp if batched else gxp[0]
        grads = (gx, gw)
        if bias is not None:
            grads += (g4.sum(axis=(0, 1, 2)),)
        return grads

    parents = (x, filters) if bias is None else (x, filters, bias)
    return _result(out, parents, bwd)


# ---------------------------------------------------------------- pooling


def max_pool(x, mode="window", size=2, stride=None):
    """Max pooling; ``mode`` is ``"window"`` (size x size, given stride) or ``"global"``.

    Ties route the gradient to the first maximal element in row-major order.
    """
    x4, batched = _batched(x.values)
    if mode == "global":
        n, h, w, c = x4.shape
        flat = x4.reshape(n, h * w, c)
        idx = np.argmax(flat, axis=1)
        out = np.take_along_axis(flat, idx[:, None, :], axis=1).reshape(n, 1, 1, c)
        if not batched:
            out = out[0]

        def bwd(g):
            g4 = (g if batched else g[None]).reshape(n, 1, c)
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, idx[:, None, :], g4, axis=1)
            gx = gflat.reshape(x4.shape)
            return (gx if batched else gx[0],)

        return _result(out, (x,), bwd)

    if mode != "window":
        raise InvalidArgumentError(f"unknown pooling mode {mode!r}")
    stride = size if stride is None else stride
    if size > x4.shape[1] or size > x4.shape[2]:
        raise InvalidShapeError(f"pool window {size} larger than input {x4.shape[1:3]}")
    cols = _windows(x4, size, size, stride)
    n, ho, wo, c = cols.shape[:4]
    flat = cols.reshape(n, ho, wo, c, size * size)
    idx = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    if not batched:
        out = out[0]

    def bwd(g):
        g4 = g if batched else g[None]
        gx = np.zeros(x4.shape)
        for q in range(size * size):
            i, j = divmod(q, size)
            sel = np.where(idx == q, g4, 0.0)
            gx[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :] += sel
        return (gx if batched else gx[0],)

    return _result(out, (x,), bwd)


def _reduce_arg(values, axis, pick):
    axes = tuple(a % values.ndim for a in np.atleast_1d(axis))
    keep = [a for a in range(values.ndim) if a not in axes]
    moved = np.transpose(values, keep + list(axes))
    lead = moved.shape[: len(keep)]
    flat = moved.reshape(lead + (-1,))
    idx = pick(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return out, idx, keep, axes, flat.shape


def _routed_grad(g, idx, keep, axes, flat_shape, full_shape):
    gflat = np.zeros(flat_shape)
    np.put_along_axis(gflat, idx[..., None], np.asarray(g)[..., None], axis=-1)
    moved_shape = tuple(full_shape[a] for a in keep) + tuple(full_shape[a] for a in axes)
    return np.transpose(gflat.reshape(moved_shape), np.argsort(keep + list(axes)))


def reduce_min(x, axis):
    """Minimum over ``axis`` (int or tuple); gradient goes to the first argmin."""
    out, idx, keep, axes, flat_shape = _reduce_arg(x.values, axis, np.argmin)
    return _result(out, (x,), lambda g: (_routed_grad(g, idx, keep, axes, flat_shape, x.shape),))


def masked_min(x, mask, axis=-1):
    """Minimum over the entries of ``x`` where ``mask`` is true, along ``axis``."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise InvalidShapeError(f"mask shape {mask.shape} does not match {x.shape}")
    if not mask.any(axis=axis).all():
        raise InvalidArgumentError("every reduced slice needs at least one unmasked entry")
    filled = np.where(mask, x.values, np.inf)
    out, idx, keep, axes, flat_shape = _reduce_arg(filled, axis, np.argmin)
    return _result(out, (x,), lambda g: (_routed_grad(g, idx, keep, axes, flat_shape, x.shape),))


# ---------------------------------------------------------------- dense layers


def linear(x, weights):
    """``weights @ x`` with no bias; ``x`` is length m or a batch N x m."""
    w = weights.values
    if w.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != w.shape[1]:
        raise InvalidShapeError(f"cannot apply weights {w.shape} to input {x.shape}")
    out = x.values @ w.T

    def bwd(g):
        gx = g @ w
        gw = np.outer(g, x.values) if x.ndim == 1 else g.T @ x.values
        return gx, gw

    return _result(out, (x, weights), bwd)


def softmax(logits):
    v = np.asarray(logits, dtype=np.float64)
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean of ``-log softmax(logits)[label]`` (max-subtracted for stability)."""
    v = logits.values
    single = v.ndim == 1
    v2 = v[None] if single else v
    labels = np.atleast_1d(np.asarray(labels))
    if v2.ndim != 2 or labels.shape != (v2.shape[0],):
        raise InvalidShapeError(f"logits {v.shape} do not match labels {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise InvalidArgumentError("labels must be integer class indices")
    k = v2.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InvalidArgumentError(f"label out of range for {k} classes")
    n = v2.shape[0]
    shifted = v2 - v2.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(log_z - shifted[rows, labels])

    def bwd(g):
        p = softmax(v2)
        p[rows, labels] -= 1.0
        p *= g / n
        return (p[0] if single else p,)

    return _result(np.asarray(loss), (logits,), bwd)


# ---------------------------------------------------------------- prototype distances


def _patches(z4, h1, w1):
    # N, H', W', h1*w1*D in (row, col, depth) order
    cols = _windows(z4, h1, w1, 1).transpose(0, 1, 2, 4, 5, 3)
    return cols.reshape(cols.shape[:3] + (-1,))


def l2_distance_maps(z, prototypes, method="direct"):
    """Squared L2 distance from every patch of ``z`` to every prototype.

    ``z`` is H x W x D (or N x H x W x D); ``prototypes`` is m x H1 x W1 x D.
    Returns (H-H1+1) x (W-W1+1) x m (batched: leading N).  ``method="direct"``
    sums squared differences patch by patch (exactly zero on a matching
    patch); ``"expansion"`` uses |z|^2 - 2<z,p> + |p|^2.
    """
    z4, batched = _batched(z.values)
    p = prototypes.values
    if p.ndim != 4:
        raise InvalidShapeError(f"prototypes must be m x H1 x W1 x D, got {p.shape}")
    m, h1, w1, d = p.shape
    if z4.shape[3] != d:
        raise InvalidShapeError(f"prototype depth {d} does not match latent depth {z4.shape[3]}")
    if h1 > z4.shape[1] or w1 > z4.shape[2]:
        raise InvalidShapeError(f"prototype {h1}x{w1} larger than latent {z4.shape[1:3]}")
    cols = _patches(z4, h1, w1)
    pf = p.reshape(m, -1)
    if method == "direct":
        diff = cols[..., None, :] - pf
        out = np.einsum("...f,...f->...", diff, diff)
    elif method == "expansion":
        diff = None
        out = np.einsum("...f,...f->...", cols, cols)[..., None] - 2.0 * (cols @ pf.T) + np.einsum("mf,mf->m", pf, pf)
        np.maximum(out, 0.0, out=out)
    else:
        raise InvalidArgumentError(f"unknown distance method {method!r}")
    if not batched:
        out = out[0]

    def bwd(g):
        g4 = g if batched else g[None]
        gsum = g4.sum(axis=-1)
        gp = 2.0 * pf * g4.sum(axis=(0, 1, 2))[:, None] - 2.0 * np.tensordot(g4, cols, axes=([0, 1, 2], [0, 1, 2]))
        gz = None
        if z.requires_grad:
            gcols = 2.0 * (cols * gsum[..., None] - g4 @ pf)
            n, ho, wo, _ = gcols.shape
            gcols = gcols.reshape(n, ho, wo, h1, w1, d)
            gz4 = _scatter_windows(gcols, z4.shape, 1)
            gz = gz4 if batched else gz4[0]
        return gz, gp.reshape(p.shape)

    return _result(out, (z, prototypes), bwd)


def l2_distance_map(z, p):
    """Distance map of a single prototype ``p`` (H1 x W1 x D) over ``z``."""
    if p.ndim != 3:
        raise InvalidShapeError(f"prototype must be H1 x W1 x D, got {p.shape}")
    stacked = _result(p.values[None], (p,), lambda g: (g[0],))
    maps = l2_distance_maps(z, stacked)
    return _result(maps.values[..., 0], (maps,), lambda g: (g[..., None],))


# ---------------------------------------------------------------- oracles


def finite_diff_grad(fn, at, step=1e-5):
    """Central-difference gradient of the scalar function ``fn`` at ``at``."""
    if step <= 0:
        raise InvalidArgumentError("step must be positive")
    base = np.array(at.values if isinstance(at, Tensor) else at, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(np.asarray(_scalar(fn(Tensor(base.copy())))))
        flat[i] = orig - step
        lo = float(np.asarray(_scalar(fn(Tensor(base.copy())))))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return Tensor(grad)


def _scalar(value):
    if isinstance(value, Tensor):
        value = value.values
    value = np.asarray(value)
    if value.size != 1:
        raise InvalidArgumentError("finite_diff_grad needs a scalar-valued function")
    return value.reshape(())


def relative_error(a, b, floor=1e-12):
    """Max-norm relative error ``max|a-b| / max(max|a|, max|b|)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale_ = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), floor)
    return float(np.max(np.abs(a - b), initial=0.0) / scale_)
