"""Divergence-free and momentum PINN residuals.

Input derivatives of the velocity field come from central differences; each
stencil evaluation is an ordinary tape computation, so parameter gradients
flow through all of them.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .diffcore import tape as T

log = logging.getLogger(__name__)


@dataclass
class PhysicsConfig:
    h_fd: float = 1e-3
    occupancy_step: float = 0.01
    alpha_min: float = 1e-4
    lambda_div: float = 5.0
    lambda_mom: float = 0.1
    n_samples: int = 16384

    def __post_init__(self):
        if self.h_fd <= 0:
            raise ValueError("h_fd must be positive")
        if self.lambda_div < 0 or self.lambda_mom < 0:
            raise ValueError("loss weights must be non-negative")


def grid_alpha(sigma, step=0.01):
    return 1.0 - np.exp(-np.asarray(sigma) * step)


def occupied_filter(points, t, field, config=PhysicsConfig()):
    """Keep (p, t) where 1 - exp(-sigma * step) >= alpha_min at the nearest keyframe.

    The density query is made without recording gradients.
    """
    points = np.asarray(points)
    if len(points) == 0:
        return np.zeros(0, dtype=bool)
    k = field.schedule.index_of(np.asarray(t))
    with T.no_grad():
        _, sigma = field.density(points.astype(field.params.dtype), k)
    return grid_alpha(sigma.data, config.occupancy_step) >= config.alpha_min


def fd_jacobian(velocity, p, t, h):
    """Central-difference Jacobian and time derivative.

    Returns ``(J, dvdt)`` where ``J[:, i, j] = d v_i / d x_j`` (shape [N, 3, 3])
    and ``dvdt`` has shape [N, 3].  ``velocity(p, t)`` may return arrays or tape
    variables; the result is of the same kind.
    """
    p = np.asarray(p)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(p),))
    cols = []
    for j in range(3):
        e = np.zeros(3, dtype=p.dtype)
        e[j] = h
        d = T.sub(velocity(p + e, t), velocity(p - e, t))
        cols.append(T.reshape(T.div(d, 2 * h), (len(p), 3, 1)))
    J = T.concat(cols, axis=2)
    dvdt = T.div(T.sub(velocity(p, t + h), velocity(p, t - h)), 2 * h)
    return J, dvdt


def divergence(J):
    return T.add(T.add(J[:, 0, 0], J[:, 1, 1]), J[:, 2, 2])


def _empty(kind):
    log.warning("%s loss: no occupied samples, contributing 0", kind)
    return T.Var(np.zeros(()), op="const")


def divergence_loss(p, t, velocity, h=1e-3):
    """mean |div v| over the samples."""
    if len(p) == 0:
        return _empty("divergence")
    J, _ = fd_jacobian(velocity, p, t, h)
    return T.mean(T.abs_(divergence(J)))


def momentum_residual(p, t, velocity, acceleration, h=1e-3):
    """dv/dt + J v - a per sample (convective term as Jacobian times velocity)."""
    J, dvdt = fd_jacobian(velocity, p, t, h)
    v = velocity(np.asarray(p), np.broadcast_to(np.asarray(t, dtype=np.float64), (len(p),)))
    conv = T.sum_(T.mul(J, T.reshape(v, (len(p), 1, 3))), axis=2)
    return T.sub(T.add(dvdt, conv), acceleration(np.asarray(p), t))


def momentum_loss(p, t, velocity, acceleration, h=1e-3):
    """mean ||dv/dt + (grad v) v - a||_2 over the samples."""
    if len(p) == 0:
        return _empty("momentum")
    return T.mean(T.norm(momentum_residual(p, t, velocity, acceleration, h), axis=1))


def physics_losses(p, t, velocity, acceleration, h=1e-3):
    """Both PINN losses sharing one set of stencil evaluations."""
    if len(p) == 0:
        return _empty("divergence"), _empty("momentum")
    p = np.asarray(p)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(p),))
    J, dvdt = fd_jacobian(velocity, p, t, h)
    div = T.mean(T.abs_(divergence(J)))
    v = velocity(p, t)
    conv = T.sum_(T.mul(J, T.reshape(v, (len(p), 1, 3))), axis=2)
    res = T.sub(T.add(dvdt, conv), acceleration(p, t))
    return div, T.mean(T.norm(res, axis=1))
