"""Reverse-mode gradient tape over a small, fixed set of numpy primitives.

Every primitive takes ``Var`` objects, numpy arrays or python scalars and
returns a ``Var``.  A node only records its parents when at least one of them
requires a gradient, so purely constant sub-computations cost nothing on the
backward pass.  Backward runs in strictly decreasing creation order, which
makes gradient accumulation deterministic.
"""
from __future__ import annotations

import contextlib
import itertools

import numpy as np
import scipy.sparse as sp

_ids = itertools.count()
_recording = True


class NonFiniteError(FloatingPointError):
    """Raised when a graph produces a NaN/Inf; names the offending primitive."""

    def __init__(self, op, node_id, message=None):
        self.op = op
        self.node_id = node_id
        super().__init__(message or f"non-finite value produced by primitive '{op}' (node {node_id})")


@contextlib.contextmanager
def no_grad():
    """Evaluate primitives without recording the graph."""
    global _recording
    prev = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = prev


def is_recording():
    return _recording


class Var:
    __slots__ = ("data", "parents", "backward", "op", "name", "id", "requires_grad")
    __array_priority__ = 1000

    def __init__(self, data, parents=(), backward=None, op="const", name=None):
        self.data = data
        self.parents = parents
        self.backward = backward
        self.op = op
        self.name = name
        self.id = next(_ids)
        self.requires_grad = name is not None or bool(parents)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Var(op={self.op!r}, shape={self.data.shape}{tag})"

    def numpy(self):
        return self.data

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __truediv__ = lambda a, b: div(a, b)
    __rtruediv__ = lambda a, b: div(b, a)
    __matmul__ = lambda a, b: matmul(a, b)
    __rmatmul__ = lambda a, b: matmul(b, a)
    __neg__ = lambda a: neg(a)
    __getitem__ = lambda a, idx: getitem(a, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def data_of(x):
    return x.data if isinstance(x, Var) else x


def constant(x):
    return x if isinstance(x, Var) else Var(np.asarray(x))


def stop_gradient(x):
    """Explicit gradient barrier: the value passes, the gradient does not."""
    return Var(data_of(x), op="stop_gradient")


def _node(data, op, inputs, vjp):
    if not _recording:
        return Var(data, op=op)
    needs = tuple(isinstance(x, Var) and x.requires_grad for x in inputs)
    if not any(needs):
        return Var(data, op=op)
    parents = tuple(x for x, n in zip(inputs, needs) if n)
    idx = [i for i, n in enumerate(needs) if n]

    def backward(g):
        grads = vjp(g, needs)
        return [grads[i] for i in idx]

    return Var(data, parents, backward, op)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _shape(x):
    return np.shape(data_of(x))


# ----------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    out = data_of(a) + data_of(b)
    sa, sb = _shape(a), _shape(b)
    return _node(out, "add", (a, b), lambda g, n: (
        _unbroadcast(g, sa) if n[0] else None,
        _unbroadcast(g, sb) if n[1] else None))


def sub(a, b):
    out = data_of(a) - data_of(b)
    sa, sb = _shape(a), _shape(b)
    return _node(out, "sub", (a, b), lambda g, n: (
        _unbroadcast(g, sa) if n[0] else None,
        _unbroadcast(-g, sb) if n[1] else None))


def neg(a):
    return _node(-data_of(a), "neg", (a,), lambda g, n: (-g,))


def mul(a, b):
    da, db = data_of(a), data_of(b)
    out = da * db
    sa, sb = np.shape(da), np.shape(db)
    return _node(out, "mul", (a, b), lambda g, n: (
        _unbroadcast(g * db, sa) if n[0] else None,
        _unbroadcast(g * da, sb) if n[1] else None))


def div(a, b):
    da, db = data_of(a), data_of(b)
    out = da / db
    sa, sb = np.shape(da), np.shape(db)
    return _node(out, "div", (a, b), lambda g, n: (
        _unbroadcast(g / db, sa) if n[0] else None,
        _unbroadcast(-g * out / db, sb) if n[1] else None))


def exp(a):
    out = np.exp(data_of(a))
    return _node(out, "exp", (a,), lambda g, n: (g * out,))


def log(a):
    da = data_of(a)
    return _node(np.log(da), "log", (a,), lambda g, n: (g / da,))


def sin(a):
    da = data_of(a)
    return _node(np.sin(da), "sin", (a,), lambda g, n: (g * np.cos(da),))


def cos(a):
    da = data_of(a)
    return _node(np.cos(da), "cos", (a,), lambda g, n: (-g * np.sin(da),))


def softplus(a):
    da = data_of(a)
    out = np.logaddexp(0, da).astype(da.dtype, copy=False)
    return _node(out, "softplus", (a,), lambda g, n: (g * _sigmoid(da),))


def _sigmoid(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    out = _sigmoid(np.asarray(data_of(a)))
    return _node(out, "sigmoid", (a,), lambda g, n: (g * out * (1 - out),))


def relu(a):
    da = data_of(a)
    mask = da > 0
    return _node(da * mask, "relu", (a,), lambda g, n: (g * mask,))


def abs_(a):
    da = data_of(a)
    return _node(np.abs(da), "abs", (a,), lambda g, n: (g * np.sign(da),))


def clip(a, lo, hi):
    da = data_of(a)
    inside = (da >= lo) & (da <= hi)
    return _node(np.clip(da, lo, hi), "clip", (a,), lambda g, n: (g * inside,))


# ----------------------------------------------------------------------------
# reductions and norms


def sum_(a, axis=None, keepdims=False):
    da = data_of(a)
    out = np.sum(da, axis=axis, keepdims=keepdims)

    def vjp(g, n):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, da.shape).astype(da.dtype, copy=True),)

    return _node(np.asarray(out), "sum", (a,), vjp)


def mean(a, axis=None, keepdims=False):
    da = data_of(a)
    count = da.size if axis is None else np.prod([da.shape[ax] for ax in np.atleast_1d(axis)])
    out = np.mean(da, axis=axis, keepdims=keepdims)

    def vjp(g, n):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, da.shape).astype(da.dtype, copy=True),)

    return _node(np.asarray(out, dtype=da.dtype), "mean", (a,), vjp)


def norm(a, axis=-1):
    """Euclidean norm along ``axis``; the gradient at exactly zero is taken as zero."""
    da = data_of(a)
    out = np.sqrt(np.sum(da * da, axis=axis))

    def vjp(g, n):
        safe = np.where(out > 0, out, 1)
        scale = np.where(out > 0, g / safe, 0)
        return (np.expand_dims(scale, axis) * da,)

    return _node(out, "norm", (a,), vjp)


def l1_norm(a, axis=-1):
    return sum_(abs_(a), axis=axis)


def softmax(a, axis=-1):
    da = data_of(a)
    z = np.exp(da - da.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def vjp(g, n):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, "softmax", (a,), vjp)


def cumsum_exclusive(a, axis=-1):
    """Running sum that excludes the current element (first entry is 0)."""
    da = data_of(a)
    inc = np.cumsum(da, axis=axis)
    out = inc - da

    def vjp(g, n):
        # adjoint of exclusive prefix sum = exclusive suffix sum
        rev = np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)
        return (rev - g,)

    return _node(out, "cumsum_exclusive", (a,), vjp)


# ----------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a, b):
    da, db = data_of(a), data_of(b)
    out = da @ db

    def vjp(g, n):
        ga = gb = None
        if n[0]:
            ga = _unbroadcast(g @ np.swapaxes(db, -1, -2), da.shape) if db.ndim > 1 else np.multiply.outer(g, db)
        if n[1]:
            gb = _unbroadcast(np.swapaxes(da, -1, -2) @ g, db.shape) if da.ndim > 1 else np.multiply.outer(da, g)
        return ga, gb

    return _node(out, "matmul", (a, b), vjp)


def affine(x, w, b=None):
    """x @ w + b, the dense layer primitive."""
    out = matmul(x, w)
    return out if b is None else add(out, b)


def dense(x, w, b, activate=False):
    """Fused ``relu(x @ w + b)`` (or without the ReLU) for 2-D ``x``."""
    dx, dw, db = data_of(x), data_of(w), data_of(b)
    out = dx @ dw
    out += db
    if activate:
        np.maximum(out, 0, out=out)

    def vjp(g, n):
        if activate:
            g = g * (out > 0)
        gx = g @ dw.T if n[0] else None
        gw = dx.T @ g if n[1] else None
        gb = g.sum(axis=0) if n[2] else None
        return gx, gw, gb

    return _node(out, "dense", (x, w, b), vjp)


def transpose(a, axes=None):
    da = data_of(a)
    if axes is None:
        axes = tuple(range(da.ndim))[:-2] + (da.ndim - 1, da.ndim - 2)
    inv = np.argsort(axes)
    return _node(np.transpose(da, axes), "transpose", (a,), lambda g, n: (np.transpose(g, inv),))


def reshape(a, shape):
    da = data_of(a)
    return _node(da.reshape(shape), "reshape", (a,), lambda g, n: (g.reshape(da.shape),))


def getitem(a, idx):
    da = data_of(a)
    out = da[idx]

    def vjp(g, n):
        full = np.zeros_like(da)
        if _is_advanced(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _node(out, "getitem", (a,), vjp)


def _is_advanced(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def concat(items, axis=-1):
    datas = [data_of(x) for x in items]
    out = np.concatenate(datas, axis=axis)
    splits = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def vjp(g, n):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, "concat", tuple(items), vjp)


def take(a, index, axis=0):
    """Gather rows (or slices along ``axis``) by integer index."""
    da = data_of(a)
    index = np.asarray(index)
    out = np.take(da, index, axis=axis)

    def vjp(g, n):
        full = np.zeros_like(da)
        np.add.at(np.moveaxis(full, axis, 0), index, np.moveaxis(g, axis, 0))
        return (full,)

    return _node(out, "take", (a,), vjp)


def scatter_add(values, index, size):
    """Adjoint of ``take`` along axis 0: sums rows of ``values`` into ``size`` bins."""
    dv = data_of(values)
    index = np.asarray(index)
    flat = dv.reshape(len(dv), -1)
    out = np.empty((size, flat.shape[1]), dtype=dv.dtype)
    for c in range(flat.shape[1]):
        out[:, c] = np.bincount(index, weights=flat[:, c], minlength=size)
    out = out.reshape((size,) + dv.shape[1:])
    return _node(out, "scatter_add", (values,), lambda g, n: (g[index],))


# ----------------------------------------------------------------------------
# grid interpolation


def _scatter_rows(vals, cols, per_row, g, n_cells):
    """W^T g for a sparse W [N, n_cells] holding ``per_row`` entries in each row."""
    n = g.shape[0]
    W = sp.csr_matrix((vals, cols, np.arange(0, n * per_row + 1, per_row)), shape=(n, n_cells))
    return np.asarray(W.T @ g, dtype=g.dtype)


def _grid_coord(u, res):
    x = (u + 1.0) * (0.5 * (res - 1))
    i0 = np.clip(np.floor(x).astype(np.int64), 0, max(res - 2, 0))
    return i0, x - i0


def grid_sample2d(plane, u, v):
    """Bilinear lookup of a channels-last plane ``[R0, R1, C]`` at coords in [-1, 1].

    Nodes sit exactly at -1 and +1 (corner-aligned).  ``u`` indexes axis 0 and
    ``v`` axis 1.  Differentiable w.r.t. the plane and both coordinates.
    """
    P = data_of(plane)
    du, dv = data_of(u), data_of(v)
    r0, r1, c = P.shape
    i, fx = _grid_coord(du, r0)
    j, fy = _grid_coord(dv, r1)
    fx = fx.astype(P.dtype)[:, None]
    fy = fy.astype(P.dtype)[:, None]
    flat = P.reshape(r0 * r1, c)
    i1 = np.minimum(i + 1, r0 - 1)
    j1 = np.minimum(j + 1, r1 - 1)
    idx = (i * r1 + j, i1 * r1 + j, i * r1 + j1, i1 * r1 + j1)
    c00, c10, c01, c11 = (flat[k] for k in idx)
    out = (c00 * (1 - fx) + c10 * fx) * (1 - fy) + (c01 * (1 - fx) + c11 * fx) * fy

    def vjp(g, n):
        gp = gu = gv = None
        if n[0]:
            w = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
            vals = np.concatenate(w, axis=1).ravel()
            cols = np.stack(idx, axis=1).ravel()
            gp = _scatter_rows(vals, cols, 4, g, r0 * r1).reshape(P.shape)
        if n[1]:
            dx = (c10 - c00) * (1 - fy) + (c11 - c01) * fy
            gu = (g * dx).sum(axis=1) * (0.5 * (r0 - 1))
        if n[2]:
            dy = (c01 - c00) * (1 - fx) + (c11 - c10) * fx
            gv = (g * dy).sum(axis=1) * (0.5 * (r1 - 1))
        return gp, gu, gv

    return _node(out, "grid_sample2d", (plane, u, v), vjp)


def line_sample(plane, u, col):
    """Linear lookup along axis 0 of ``[R, K, C]`` at column ``col`` (integer, per point).

    The column axis is indexed, never interpolated.
    """
    P = data_of(plane)
    du = data_of(u)
    col = np.broadcast_to(np.asarray(col, dtype=np.int64), np.shape(du))
    r, k, c = P.shape
    i, fx = _grid_coord(du, r)
    fx = fx.astype(P.dtype)[:, None]
    i1 = np.minimum(i + 1, r - 1)
    flat = P.reshape(r * k, c)
    idx0, idx1 = i * k + col, i1 * k + col
    c0, c1 = flat[idx0], flat[idx1]
    out = c0 * (1 - fx) + c1 * fx

    def vjp(g, n):
        gp = gu = None
        if n[0]:
            vals = np.concatenate([1 - fx, fx], axis=1).ravel()
            cols = np.stack([idx0, idx1], axis=1).ravel()
            gp = _scatter_rows(vals, cols, 2, g, r * k).reshape(P.shape)
        if n[1]:
            gu = (g * (c1 - c0)).sum(axis=1) * (0.5 * (r - 1))
        return gp, gu

    return _node(out, "line_sample", (plane, u), vjp)


# ----------------------------------------------------------------------------
# rigid fitting


def polar_rotation(H, eps=1e-12):
    """Proper rotation maximizing tr(R H) for a batch of 3x3 cross-covariances.

    With H = U S V^T, R = V diag(1, 1, det(V U^T)) U^T.  The reverse rule is the
    derivative of the orthogonal polar factor of M = H^T: with P = R^T M
    symmetric, dR = R Omega where P Omega + Omega P = R^T dM - dM^T R.
    """
    Hd = data_of(H)
    U, s, Vt = np.linalg.svd(Hd)
    V = np.swapaxes(Vt, -1, -2)
    d = np.sign(np.linalg.det(V @ np.swapaxes(U, -1, -2)))
    d = np.where(d == 0, 1.0, d)
    D = np.ones(Hd.shape[:-1], dtype=Hd.dtype)
    D[..., -1] = d
    R = (V * D[..., None, :]) @ np.swapaxes(U, -1, -2)
    mu = s * D  # eigenvalues of P in the basis U

    def vjp(g, n):
        Ut = np.swapaxes(U, -1, -2)
        Rt = np.swapaxes(R, -1, -2)
        A = Ut @ Rt @ g @ U
        denom = mu[..., :, None] + mu[..., None, :]
        denom = np.where(np.abs(denom) < eps, eps, denom)
        B = A / denom
        gM = R @ U @ (B - np.swapaxes(B, -1, -2)) @ Ut
        return (np.swapaxes(gM, -1, -2),)

    return _node(R, "polar_rotation", (H,), vjp)


# ----------------------------------------------------------------------------
# backward pass


def _topo(loss):
    seen = {loss.id: loss}
    stack = [loss]
    while stack:
        node = stack.pop()
        for p in node.parents:
            if p.id not in seen:
                seen[p.id] = p
                stack.append(p)
    return [seen[k] for k in sorted(seen, reverse=True)]


def find_nonfinite(out):
    """Return the earliest node in the graph of ``out`` holding a non-finite value."""
    for node in reversed(_topo(out)):
        if not np.all(np.isfinite(node.data)):
            return node
    return None


def backward(loss, seed=None):
    """Accumulate d(loss)/d(leaf) for every named leaf reachable from ``loss``."""
    if not np.all(np.isfinite(loss.data)):
        bad = find_nonfinite(loss) or loss
        raise NonFiniteError(bad.op, bad.id)
    named = {}
    if not loss.requires_grad:
        return named
    grads = {loss.id: np.ones_like(loss.data) if seed is None else seed}
    for node in _topo(loss):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node.name is not None and not node.parents:
            prev = named.get(node.name)
            named[node.name] = g if prev is None else prev + g
            continue
        for p, gp in zip(node.parents, node.backward(g)):
            if gp is None:
                continue
            prev = grads.get(p.id)
            grads[p.id] = gp if prev is None else prev + gp
    return named
