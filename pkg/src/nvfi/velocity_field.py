"""Velocity field g_Phi = w_Phi(x, y, z, t) . M_v(x, y, z) and the acceleration field."""
from __future__ import annotations

import numpy as np

from . import nn
from .diffcore import tape as T
from .nn import posenc

__all__ = ["AccelerationField", "VelocityField", "posenc", "twist_basis", "apply_twist"]


def twist_basis(p):
    """The 6x3 basis rows at each point: shape [N, 6, 3] (numpy only)."""
    p = np.asarray(p)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    o, l = np.zeros_like(x), np.ones_like(x)
    rows = [(l, o, o), (o, l, o), (o, o, l), (-z, o, x), (-y, x, o), (o, -z, y)]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def apply_twist(w, p):
    """v = sum_j w_j * row_j(M_v(p)) written out component-wise (tape aware)."""
    x, y, z = p[:, 0:1], p[:, 1:2], p[:, 2:3]
    w0, w1, w2, w3, w4, w5 = (w[:, j:j + 1] for j in range(6))
    vx = T.sub(T.sub(w0, T.mul(w3, z)), T.mul(w4, y))
    vy = T.sub(T.add(w1, T.mul(w4, x)), T.mul(w5, z))
    vz = T.add(T.add(w2, T.mul(w3, x)), T.mul(w5, y))
    return T.concat([vx, vy, vz], axis=1)


class _SpaceTimeMLP:
    out_dim = 3

    default_prefix = None

    def __init__(self, params, aabb, prefix=None, bands=3, hidden=128, depth=4):
        self.params = params
        self.aabb = np.asarray(aabb, dtype=np.float64).reshape(2, 3)
        self.prefix = prefix or self.default_prefix
        self.bands = bands
        self.hidden = hidden
        self.depth = depth

    @classmethod
    def create(cls, params, aabb, rng, prefix=None, group=None, **kw):
        f = cls(params, aabb, prefix or cls.default_prefix, **kw)
        sizes = [nn.posenc_width(4, f.bands)] + [f.hidden] * f.depth + [cls.out_dim]
        # zero head: the field starts identically zero
        nn.init_mlp(params, f.prefix, sizes, rng, group or cls.default_prefix, zero_last=True)
        return f

    def encode(self, p, t):
        dtype = T.data_of(p).dtype
        center = ((self.aabb[0] + self.aabb[1]) / 2).astype(dtype)
        half = ((self.aabb[1] - self.aabb[0]) / 2).astype(dtype)
        u = T.div(T.sub(p, center), half)
        tt = np.asarray(t, dtype=dtype)
        tt = np.broadcast_to(tt.reshape(-1, 1) if tt.ndim else tt, (T.data_of(p).shape[0], 1))
        return posenc(T.concat([u, tt], axis=1), self.bands)

    def raw(self, p, t):
        return nn.mlp(self.params, self.prefix, self.encode(p, t), self.depth + 1)


class VelocityField(_SpaceTimeMLP):
    """Twist-weight MLP times the fixed divergence-free basis."""

    out_dim = 6
    default_prefix = "vel"

    def weights(self, p, t):
        return self.raw(p, t)

    def velocity(self, p, t):
        return apply_twist(self.weights(p, t), p)

    __call__ = velocity

    def numpy(self, p, t):
        with T.no_grad():
            return self.velocity(np.asarray(p, dtype=self.params.dtype), t).data


class AccelerationField(_SpaceTimeMLP):
    """a(x, y, z, t) = F / rho with uniform density absorbed."""

    out_dim = 3
    default_prefix = "acc"

    def acceleration(self, p, t):
        return self.raw(p, t)

    __call__ = acceleration
