"""Dense layers and positional encoding on top of the tape."""
from __future__ import annotations

import numpy as np

from .diffcore import tape as T


def posenc(u, bands):
    """(u, sin(2^0 pi u), cos(2^0 pi u), ..., sin(2^(L-1) pi u), cos(2^(L-1) pi u)).

    Works on arrays and on tape variables; width grows from n to n(1 + 2L).
    """
    if bands == 0:
        return u
    shape = tuple(np.shape(T.data_of(u)))
    out_shape = shape[:-1] + (shape[-1] * (1 + 2 * bands),)
    if not isinstance(u, T.Var):
        u = np.asarray(u)[..., None]
        parts = [u]
        for k in range(bands):
            scaled = u * float(np.pi * 2 ** k)
            parts += [np.sin(scaled), np.cos(scaled)]
        return np.concatenate(parts, axis=-1).reshape(out_shape)
    u = T.reshape(u, shape + (1,))
    parts = [u]
    for k in range(bands):
        scaled = T.mul(u, float(np.pi * 2 ** k))
        parts += [T.sin(scaled), T.cos(scaled)]
    return T.reshape(T.concat(parts, axis=-1), out_shape)


def posenc_width(n, bands):
    return n * (1 + 2 * bands)


def init_mlp(params, prefix, sizes, rng, group, zero_last=False):
    """Register weights ``{prefix}.{i}.w/b`` with torch-style uniform init."""
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        if zero_last and i == len(sizes) - 2:
            w = np.zeros((fan_in, fan_out))
            b = np.zeros(fan_out)
        else:
            w = rng.uniform(-bound, bound, (fan_in, fan_out))
            b = rng.uniform(-bound, bound, fan_out)
        params.add(f"{prefix}.{i}.w", w, group)
        params.add(f"{prefix}.{i}.b", b, group)


def mlp(params, prefix, x, n_layers):
    """ReLU hidden layers and a linear head."""
    h = x
    for i in range(n_layers):
        h = T.dense(h, params.var(f"{prefix}.{i}.w"), params.var(f"{prefix}.{i}.b"), activate=i < n_layers - 1)
    return h


def mlp_depth(params, prefix):
    i = 0
    while f"{prefix}.{i}.w" in params:
        i += 1
    return i
