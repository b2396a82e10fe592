"""Keyframe dynamic radiance field: six-plane Hadamard factorization.

Density and appearance each use three spatial planes (xy, xz, yz) and three
space-time planes (z-tau, y-tau, x-tau).  The tau axis has one column per
keyframe and is indexed, never interpolated.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import nn
from .diffcore import tape as T

log = logging.getLogger(__name__)

SPACE_PLANES = (("xy", 0, 1), ("xz", 0, 2), ("yz", 1, 2))
TIME_PLANES = (("zt", 2), ("yt", 1), ("xt", 0))


@dataclass(frozen=True)
class KeyframeSchedule:
    """Keyframe timestamps (normalized time), 0-based index k = 0..K-1."""

    times: tuple
    t_train: float

    @property
    def K(self):
        return len(self.times)

    @classmethod
    def uniform(cls, K, t_train, stamps=None):
        """t_k = k * t_train / K for k = 1..K, optionally snapped to the nearest stamp.

        Snapping guarantees every keyframe has observed frames; ties go to the
        earlier stamp.
        """
        if K < 1:
            raise ValueError("need at least one keyframe")
        ideal = [k * t_train / K for k in range(1, K + 1)]
        if stamps is not None:
            stamps = np.sort(np.asarray(stamps, dtype=np.float64))
            ideal = [float(stamps[np.argmin(np.abs(stamps - t) - 1e-12 * (stamps < t))]) for t in ideal]
            if len(set(ideal)) != K:
                raise ValueError(f"{K} keyframes do not fit in {len(stamps)} training stamps")
        return cls(tuple(float(t) for t in ideal), float(t_train))

    def index_of(self, t):
        """Nearest keyframe index; ties resolve to the smaller index."""
        times = np.asarray(self.times)
        t_arr = np.asarray(t, dtype=np.float64)
        k = np.argmin(np.abs(times[None, :] - t_arr.reshape(-1, 1)), axis=1)
        return int(k[0]) if t_arr.ndim == 0 else k.reshape(t_arr.shape)

    def time_of(self, k):
        return np.asarray(self.times)[k]

    def is_keyframe(self, t, tol=1e-9):
        return bool(np.min(np.abs(np.asarray(self.times) - t)) <= tol)

    def to_json(self):
        return {"times": list(self.times), "t_train": self.t_train}

    @classmethod
    def from_json(cls, d):
        return cls(tuple(d["times"]), float(d["t_train"]))


def _plane_init(rng, shape):
    # Hadamard product of six planes: keep each near 0.1^(1/6) so the fused value starts near 0.1
    return rng.uniform(0.9, 1.1, shape) * 0.1 ** (1 / 6)


class KeyframeField:
    """f_Theta: (p, keyframe index) -> (sigma_raw, sigma, e) and the color decoder."""

    def __init__(self, params, schedule, aabb, n_density=24, n_app=48, feat_dim=24,
                 view_bands=2, hidden=128, prefix="kf", debug=False, density_shift=0.0):
        self.params = params
        self.schedule = schedule
        self.aabb = np.asarray(aabb, dtype=np.float64).reshape(2, 3)
        self.n_density = n_density
        self.n_app = n_app
        self.feat_dim = feat_dim
        self.view_bands = view_bands
        self.hidden = hidden
        self.prefix = prefix
        self.debug = debug
        # sigma = softplus(sigma_raw + shift); a negative shift lets empty space reach ~0 density
        self.density_shift = density_shift

    @classmethod
    def create(cls, params, schedule, aabb, resolution, rng, **kw):
        f = cls(params, schedule, aabb, **kw)
        K, R = schedule.K, resolution
        for kind, m in (("density", f.n_density), ("app", f.n_app)):
            for name, _, _ in SPACE_PLANES:
                params.add(f.plane_name(kind, name), _plane_init(rng, (R, R, m)), "planes")
            for name, _ in TIME_PLANES:
                params.add(f.plane_name(kind, name), _plane_init(rng, (R, K, m)), "planes")
        bound = 1 / np.sqrt(f.n_app)
        params.add(f"{f.prefix}.basis", rng.uniform(-bound, bound, (f.n_app, f.feat_dim)), "decoder")
        d_in = f.feat_dim + nn.posenc_width(3, f.view_bands)
        nn.init_mlp(params, f"{f.prefix}.color", [d_in, f.hidden, f.hidden, 3], rng, "decoder")
        return f

    def plane_name(self, kind, name):
        return f"{self.prefix}.{kind}.{name}"

    def plane_names(self):
        return [self.plane_name(kind, n) for kind in ("density", "app")
                for n in [p[0] for p in SPACE_PLANES] + [p[0] for p in TIME_PLANES]]

    @property
    def resolution(self):
        return self.params[self.plane_name("density", "xy")].shape[0]

    def normalize(self, p):
        center = (self.aabb[0] + self.aabb[1]) / 2
        half = (self.aabb[1] - self.aabb[0]) / 2
        u = T.div(T.sub(p, center.astype(T.data_of(p).dtype)), half.astype(T.data_of(p).dtype))
        if self.debug and np.any(np.abs(u.data) > 1):
            log.debug("%d query points outside the AABB were clamped", int(np.sum(np.any(np.abs(u.data) > 1, -1))))
        return T.clip(u, -1.0, 1.0)

    def _fuse(self, kind, u, k):
        coords = [u[:, 0], u[:, 1], u[:, 2]]
        k = np.broadcast_to(np.asarray(k, dtype=np.int64), (u.shape[0],))
        if np.any(k < 0) or np.any(k >= self.schedule.K):
            raise IndexError(f"keyframe index outside [0, {self.schedule.K})")
        out = None
        for (sname, a, b), (tname, c) in zip(SPACE_PLANES, TIME_PLANES):
            fs = T.grid_sample2d(self.params.var(self.plane_name(kind, sname)), coords[a], coords[b])
            ft = T.line_sample(self.params.var(self.plane_name(kind, tname)), coords[c], k)
            pair = T.mul(fs, ft)
            out = pair if out is None else T.mul(out, pair)
        return out

    def density(self, p, k, normalized=None):
        u = self.normalize(p) if normalized is None else normalized
        raw = T.sum_(self._fuse("density", u, k), axis=1)
        return raw, T.softplus(T.add(raw, self.density_shift) if self.density_shift else raw)

    def appearance(self, p, k, normalized=None):
        u = self.normalize(p) if normalized is None else normalized
        return T.matmul(self._fuse("app", u, k), self.params.var(f"{self.prefix}.basis"))

    def eval_density_feature(self, p, k):
        u = self.normalize(p)
        raw, sigma = self.density(p, k, normalized=u)
        return raw, sigma, self.appearance(p, k, normalized=u)

    def decode_color(self, e, d):
        x = T.concat([e, nn.posenc(np.asarray(d, dtype=T.data_of(e).dtype), self.view_bands)], axis=-1)
        return T.sigmoid(nn.mlp(self.params, f"{self.prefix}.color", x, 3))

    def upsample(self, new_res):
        """Resample every plane's spatial axes to ``new_res`` nodes (time axis untouched)."""
        R = self.resolution
        if new_res < R:
            raise ValueError(f"cannot downsample from {R} to {new_res}")
        if new_res == R:
            return []
        changed = []
        for kind in ("density", "app"):
            for name, _, _ in SPACE_PLANES:
                key = self.plane_name(kind, name)
                arr = resample_axis(resample_axis(self.params[key], 0, new_res), 1, new_res)
                self.params.replace(key, arr)
                changed.append(key)
            for name, _ in TIME_PLANES:
                key = self.plane_name(kind, name)
                self.params.replace(key, resample_axis(self.params[key], 0, new_res))
                changed.append(key)
        return changed

    def tv_loss(self):
        """Sum over planes of the mean squared neighbour difference along spatial axes."""
        total = 0.0
        for kind in ("density", "app"):
            for name, _, _ in SPACE_PLANES:
                total = T.add(total, plane_tv(self.params.var(self.plane_name(kind, name)), axes=(0, 1)))
            for name, _ in TIME_PLANES:
                total = T.add(total, plane_tv(self.params.var(self.plane_name(kind, name)), axes=(0,)))
        return total


def plane_tv(plane, axes=(0, 1)):
    total = 0.0
    n = T.data_of(plane).shape
    for ax in axes:
        if n[ax] < 2:
            continue
        hi = tuple(slice(1, None) if i == ax else slice(None) for i in range(len(n)))
        lo = tuple(slice(None, -1) if i == ax else slice(None) for i in range(len(n)))
        diff = T.sub(plane[hi], plane[lo])
        total = T.add(total, T.mean(T.mul(diff, diff)))
    return total


def resample_axis(arr, axis, new_len):
    """Corner-aligned linear resampling along one axis."""
    arr = np.asarray(arr)
    old = arr.shape[axis]
    if old == new_len:
        return arr.copy()
    x = np.linspace(0, old - 1, new_len)
    i0 = np.clip(np.floor(x).astype(int), 0, max(old - 2, 0))
    i1 = np.minimum(i0 + 1, old - 1)
    f = (x - i0).reshape([-1 if i == axis else 1 for i in range(arr.ndim)])
    return np.take(arr, i0, axis=axis) * (1 - f) + np.take(arr, i1, axis=axis) * f
