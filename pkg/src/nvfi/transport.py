"""Midpoint RK2 transport of points through a velocity field."""
from __future__ import annotations

import math

import numpy as np

from .diffcore import tape as T


def step_count(span, n_ode):
    """max(1, ceil(n_ode * |span|)), element-wise."""
    span = np.abs(np.asarray(span, dtype=np.float64))
    return np.maximum(1, np.ceil(n_ode * span - 1e-9)).astype(np.int64)


def rk2_integrate(p, t_from, t_to, velocity, steps):
    """Integrate dp/dt = velocity(p, t) from ``t_from`` to ``t_to`` with the midpoint rule.

    ``t_from``, ``t_to`` and ``steps`` may be scalars or per-point arrays; a
    point with fewer steps than the batch maximum simply stops moving once its
    own steps are used up.  Works on plain arrays or tape variables; every
    step stays on the tape, so parameter gradients see the unrolled scheme.
    """
    n = T.data_of(p).shape[0]
    dtype = T.data_of(p).dtype
    t0 = np.broadcast_to(np.asarray(t_from, dtype=np.float64), (n,))
    t1 = np.broadcast_to(np.asarray(t_to, dtype=np.float64), (n,))
    steps = np.broadcast_to(np.asarray(steps, dtype=np.int64), (n,))
    if np.any(steps < 1):
        raise ValueError("steps must be >= 1")
    h_all = (t1 - t0) / steps
    for s in range(int(steps.max())):
        active = s < steps
        h = np.where(active, h_all, 0.0)
        if not np.any(h):
            continue
        tau = t0 + s * h_all
        k1 = velocity(p, tau)
        _check(k1, s)
        mid = T.add(p, T.mul(k1, (0.5 * h)[:, None].astype(dtype)))
        k2 = velocity(mid, tau + 0.5 * h)
        _check(k2, s)
        p = T.add(p, T.mul(k2, h[:, None].astype(dtype)))
    return p


def _check(v, step):
    if not np.all(np.isfinite(T.data_of(v))):
        raise FloatingPointError(f"non-finite velocity at RK2 step {step}")


def transport_to_keyframes(points, t, schedule, velocity, n_ode=8):
    """Move points observed at times ``t`` to their nearest keyframe.

    Returns ``(p', k)`` with ``k`` the 0-based keyframe index per point.
    """
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (T.data_of(points).shape[0],))
    k = schedule.index_of(t)
    t_key = schedule.time_of(k)
    span = t_key - t
    if not np.any(span):
        return points, k
    return rk2_integrate(points, t, t_key, velocity, step_count(span, n_ode)), k


def transport_samples(points, t, schedule, field, velocity, dirs, n_ode=8):
    """Colors and densities of ray samples at time ``t`` via the nearest keyframe.

    Each point is carried to the nearest keyframe time, density and the
    view-agnostic feature are read there, and the color is decoded with the
    original ray direction.  Returns ``(colors, sigma)``.
    """
    moved, k = transport_to_keyframes(points, t, schedule, velocity, n_ode)
    _, sigma, e = field.eval_density_feature(moved, k)
    return field.decode_color(e, dirs), sigma


def steps_for_span(span, n_ode):
    return max(1, math.ceil(n_ode * abs(span) - 1e-9))
