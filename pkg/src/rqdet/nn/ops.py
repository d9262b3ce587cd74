"""Differentiable operators over :class:`~rqdet.nn.tensor.Tensor`."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .tensor import ShapeMismatch, Tensor, as_tensor, record


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from None


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return record(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return record(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                             _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    out = a.data / b.data
    return record(out, (a, b),
                  lambda g: (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                             _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return record(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return record(y, (x,), lambda g: (g * y * (1 - y),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return record(y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return record(np.log(x.data), (x,), lambda g: (g / x.data,))


def abs(x) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    return record(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    return record(np.where(cond, a.data, b.data), (a, b),
                  lambda g: (_unbroadcast(np.where(cond, g, 0), a.shape),
                             _unbroadcast(np.where(cond, 0, g), b.shape)))


# -- shape -----------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, np.integer, type(None), type(Ellipsis))) for p in parts)


def index(x, idx) -> Tensor:
    """``x[idx]``; advanced (integer-array) indices scatter-add on backward."""
    x = as_tensor(x)
    if isinstance(idx, list):
        idx = np.asarray(idx)
    basic = _is_basic(idx)

    def bw(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[idx] += g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return record(x.data[idx], (x,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeMismatch(f"concat along {axis}: {ref} vs {t.shape}")
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return record(np.concatenate([t.data for t in ts], axis=ax), ts,
                  lambda g: tuple(np.split(g, sizes, axis=ax)))


def stack(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) if axis >= 0
                   else reshape(t, t.shape + (1,)) for t in ts], axis=axis)


def repeat2x(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of a ``(C, H, W)`` map."""
    x = as_tensor(x)
    y = x.data.repeat(2, axis=1).repeat(2, axis=2)
    C, H, W = x.shape
    return record(y, (x,), lambda g: (g.reshape(C, H, 2, W, 2).sum(axis=(2, 4)),))


# -- reductions ------------------------------------------------------------

def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    y = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record(np.asarray(y), (x,), bw)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# -- linear algebra --------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1:
        out = matmul(reshape(a, (1, a.shape[0])), b)
        return reshape(out, out.shape[:-2] + out.shape[-1:])
    if b.ndim == 1:
        out = matmul(a, reshape(b, (b.shape[0], 1)))
        return reshape(out, out.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return record(ad @ bd, (a, b), bw)


def linear(x, W, b=None) -> Tensor:
    """``x @ W + b`` with ``W`` shaped ``(in, out)``."""
    x, W = as_tensor(x), as_tensor(W)
    if x.shape[-1] != W.shape[0]:
        raise ShapeMismatch(f"linear input {x.shape} vs weight {W.shape}")
    y = matmul(x, W)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise ShapeMismatch(f"linear bias {b.shape} vs weight {W.shape}")
        y = add(y, b)
    return y


# -- normalisation ---------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return record(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    D = x.shape[-1]
    if gain.shape != (D,) or bias.shape != (D,):
        raise ShapeMismatch(f"layer_norm over {D} features, gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dg = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        db = g.sum(axis=lead) if bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dxh = g * gain.data
            dx = inv * (dxh - dxh.mean(axis=-1, keepdims=True)
                        - xhat * (dxh * xhat).mean(axis=-1, keepdims=True))
        return dx, dg, db

    return record(y, (x, gain, bias), bw)


# -- sampling / convolution ------------------------------------------------

def bilinear_matrix(points: np.ndarray, H: int, W: int, group_size: int = 1) -> sp.csr_matrix:
    """Sparse ``(P // group_size, H*W)`` interpolation matrix.

    ``points`` holds continuous ``(u, v)`` = (column, row) coordinates where
    grid node ``(row i, col j)`` sits at ``(j, i)``. Neighbours outside the map
    contribute zero. Consecutive groups of ``group_size`` points are averaged.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    P = len(pts)
    u, v = pts[:, 0], pts[:, 1]
    u0 = np.floor(u)
    v0 = np.floor(v)
    fu, fv = u - u0, v - v0
    u0 = u0.astype(np.int64)
    v0 = v0.astype(np.int64)
    cols, vals = [], []
    for du, dv, wt in ((0, 0, (1 - fu) * (1 - fv)), (1, 0, fu * (1 - fv)),
                       (0, 1, (1 - fu) * fv), (1, 1, fu * fv)):
        uu, vv = u0 + du, v0 + dv
        ok = (uu >= 0) & (uu < W) & (vv >= 0) & (vv < H)
        cols.append(np.where(ok, vv * W + uu, 0))
        vals.append(np.where(ok, wt, 0.0) / group_size)
    rows = np.repeat(np.arange(P) // group_size, 4)
    m = sp.csr_matrix((np.stack(vals, axis=1).ravel(), (rows, np.stack(cols, axis=1).ravel())),
                      shape=(P // group_size, H * W))
    m.sum_duplicates()
    return m


def sample_with(x, m: sp.csr_matrix, flat_t: np.ndarray | None = None) -> Tensor:
    """Apply a precomputed interpolation matrix: ``(C, H, W) -> (C, rows)``.

    ``flat_t`` may hold a C-contiguous ``(H*W, C)`` copy of ``x`` to skip the
    per-call layout conversion.
    """
    x = as_tensor(x)
    C, H, W = x.shape
    if flat_t is None:
        flat_t = np.ascontiguousarray(x.data.reshape(C, H * W).T)
    out = np.asarray(m @ flat_t).T
    return record(out, (x,), lambda g: (np.asarray((m.T @ g.T).T).reshape(C, H, W),))


def bilinear_sample(x, points, group_size: int = 1) -> Tensor:
    """Bilinear sampling of a ``(C, H, W)`` map at ``(P, 2)`` points -> ``(C, P)``.

    The coordinates are constants: gradients reach ``x`` only.
    """
    x = as_tensor(x)
    _, H, W = x.shape
    return sample_with(x, bilinear_matrix(points, H, W, group_size))


def conv2d(x, W, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """``(Cin, H, W)`` map convolved with ``(Cout, Cin, k, k)`` weights."""
    x, Wt = as_tensor(x), as_tensor(W)
    Cin, H, Wd = x.shape
    Cout, Cin2, k, k2 = Wt.shape
    if Cin != Cin2 or k != k2:
        raise ShapeMismatch(f"conv2d input {x.shape} vs weight {Wt.shape}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (Wd + 2 * padding - k) // stride + 1
    cols = np.empty((Cin, k, k, Ho, Wo), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    cols2 = cols.reshape(Cin * k * k, Ho * Wo)
    w2 = Wt.data.reshape(Cout, -1)
    out = (w2 @ cols2).reshape(Cout, Ho, Wo)
    parents = [x, Wt]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[:, None, None]
        parents.append(b)

    def bw(g):
        g2 = g.reshape(Cout, Ho * Wo)
        gw = (g2 @ cols2.T).reshape(Wt.shape) if Wt.requires_grad else None
        gx = None
        if x.requires_grad:
            gc = (w2.T @ g2).reshape(Cin, k, k, Ho, Wo)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gc[:, i, j]
            gx = gxp[:, padding:padding + H, padding:padding + Wd] if padding else gxp
        res = [gx, gw]
        if b is not None:
            res.append(g.sum(axis=(1, 2)))
        return tuple(res)

    return record(out, parents, bw)


# -- losses ----------------------------------------------------------------

def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid_focal_loss(logits, targets, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Elementwise focal loss on logits against binary ``targets``."""
    x = as_tensor(logits)
    t = np.asarray(targets, dtype=x.data.dtype)
    if t.shape != x.shape:
        raise ShapeMismatch(f"focal targets {t.shape} vs logits {x.shape}")
    z = x.data
    p = _sigmoid(z)
    logp = -np.logaddexp(0.0, -z)
    log1mp = -np.logaddexp(0.0, z)
    pos = -alpha * (1 - p) ** gamma * logp
    neg = -(1 - alpha) * p ** gamma * log1mp
    out = t * pos + (1 - t) * neg

    def bw(g):
        dpos = alpha * (1 - p) ** gamma * (gamma * p * logp - (1 - p))
        dneg = (1 - alpha) * p ** gamma * (p - gamma * (1 - p) * log1mp)
        return (g * (t * dpos + (1 - t) * dneg),)

    return record(out, (x,), bw)
