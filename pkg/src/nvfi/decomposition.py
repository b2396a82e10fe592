"""Unsupervised rigid-object decomposition from the trained radiance and velocity fields.

An object-code MLP assigns every valid point at t = 0 a soft membership over
K_obj slots.  Each slot is fitted with a weighted rigid transform between the
points and their positions a short time later; the loss asks each point's
code-weighted rigid prediction to reproduce its actual motion, plus a
nearest-neighbour smoothness prior on the codes.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import nn
from .diffcore import tape as T
from .diffcore.params import Adam, ParamStore, gradient_of
from .transport import rk2_integrate, step_count, transport_to_keyframes

log = logging.getLogger(__name__)

# the occupancy-filter threshold: alpha 1e-4 at a 0.01 step
SIGMA_VALID = -math.log(0.9999) / 0.01


@dataclass
class DecompositionConfig:
    sigma_valid: float = SIGMA_VALID
    resolution: int = 32  # valid points come from a resolution^3 grid
    dt: float = 0.06
    neighbors: int = 8
    w_dynamic: float = 1.0
    w_smooth: float = 0.1
    lr: float = 0.005
    iters: int = 1000
    seed: int = 0
    k_obj: int = 8
    batch: int = 4096  # at most this many valid points are kept (seeded subset)
    n_ode: int = 8

    def __post_init__(self):
        if not 0 < self.dt <= 1:
            raise ValueError("dt must lie in (0, 1]")
        if self.neighbors < 1:
            raise ValueError("neighbors must be >= 1")
        if self.k_obj < 1:
            raise ValueError("k_obj must be >= 1")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class ObjectField:
    """h_Psi: posenc(p) -> softmax codes over ``k_obj`` slots."""

    def __init__(self, params, aabb, k_obj=8, bands=3, hidden=128, depth=4, prefix="obj"):
        self.params = params
        self.aabb = np.asarray(aabb, dtype=np.float64).reshape(2, 3)
        self.k_obj = k_obj
        self.bands = bands
        self.hidden = hidden
        self.depth = depth
        self.prefix = prefix

    @classmethod
    def create(cls, params, aabb, rng, **kw):
        f = cls(params, aabb, **kw)
        sizes = [nn.posenc_width(3, f.bands)] + [f.hidden] * f.depth + [f.k_obj]
        nn.init_mlp(params, f.prefix, sizes, rng, "obj")
        return f

    def meta(self):
        return {"k_obj": self.k_obj, "bands": self.bands, "hidden": self.hidden, "depth": self.depth}

    def logits(self, p):
        center = (self.aabb[0] + self.aabb[1]) / 2
        half = (self.aabb[1] - self.aabb[0]) / 2
        u = (np.asarray(p, dtype=np.float64) - center) / half
        x = nn.posenc(u.astype(self.params.dtype), self.bands)
        return nn.mlp(self.params, self.prefix, x, self.depth + 1)

    def codes(self, p):
        out = T.softmax(self.logits(p), axis=-1)
        if not np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-4):
            raise FloatingPointError("object codes left the probability simplex")
        return out

    def labels(self, p, chunk=16384):
        """1-based argmax labels (lowest index wins ties)."""
        out = np.empty(len(p), dtype=np.int64)
        with T.no_grad():
            for s in range(0, len(p), chunk):
                out[s:s + chunk] = np.argmax(self.codes(p[s:s + chunk]).data, axis=-1) + 1
        return out


def grid_points(aabb, resolution):
    aabb = np.asarray(aabb, dtype=np.float64).reshape(2, 3)
    g = (np.arange(resolution) + 0.5) / resolution
    axes = [aabb[0, i] + (aabb[1, i] - aabb[0, i]) * g for i in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)


def density_at(model, p, t, chunk=16384):
    """Density of the scene at time ``t`` (via transport to the nearest keyframe)."""
    out = np.empty(len(p))
    dtype = model.field.params.dtype
    with T.no_grad():
        for s in range(0, len(p), chunk):
            q = p[s:s + chunk].astype(dtype)
            if model.velocity is not None:
                q, k = transport_to_keyframes(q, t, model.schedule, model.velocity, model.n_ode)
            else:
                k = np.full(len(q), model.schedule.index_of(t))
            out[s:s + chunk] = model.field.density(T.data_of(q), k)[1].data
    return out


def sample_valid_points(model, resolution=32, sigma_valid=SIGMA_VALID, t=0.0):
    """Grid points inside the AABB whose density at time ``t`` is at least ``sigma_valid``."""
    grid = grid_points(model.field.aabb, resolution)
    keep = density_at(model, grid, t) >= sigma_valid
    if not keep.any():
        raise ValueError(f"no grid point reaches density {sigma_valid:g}; lower the threshold")
    return grid[keep]


def motion_vectors(P, velocity, dt, t0=0.0, n_ode=8):
    """Displacement of each point after ``dt`` of transport starting at ``t0``."""
    P = np.asarray(P)
    with T.no_grad():
        moved = rk2_integrate(P, t0, t0 + dt, velocity, step_count(dt, n_ode))
    return T.data_of(moved) - P


def weighted_kabsch(P, Q, w, tol=1e-12):
    """Rigid (R, tau, degenerate) minimizing sum w_i |R P_i + tau - Q_i|^2."""
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if w.sum() <= 0:
        raise ValueError("weights must have a positive sum")
    wn = w / w.sum()
    mu_p = wn @ P
    mu_q = wn @ Q
    X, Y = P - mu_p, Q - mu_q
    spread = np.linalg.svd((X * wn[:, None]).T @ X, compute_uv=False)
    if spread[1] <= tol * max(1.0, spread[0]):
        return np.eye(3), mu_q - mu_p, True
    H = (X * wn[:, None]).T @ Y
    U, _, Vt = np.linalg.svd(H)
    V = Vt.T
    d = np.sign(np.linalg.det(V @ U.T)) or 1.0
    R = V @ np.diag([1.0, 1.0, d]) @ U.T
    return R, mu_q - R @ mu_p, False


def fit_rigid(P, Q, codes, reg=1e-9):
    """Differentiable weighted Kabsch for every code column at once.

    ``codes`` is an [N, K] tape variable; returns (R [K, 3, 3], tau [K, 3]).
    ``reg`` keeps the centroid and covariance of empty slots finite.
    """
    n = len(P)
    P = np.asarray(P, dtype=T.data_of(codes).dtype)
    Q = np.asarray(Q, dtype=P.dtype)
    Ot = T.transpose(codes)  # [K, N]
    W = T.add(T.sum_(codes, axis=0), reg)  # [K]
    Wc = T.reshape(W, (-1, 1))
    mu_p = T.div(T.matmul(Ot, P), Wc)
    mu_q = T.div(T.matmul(Ot, Q), Wc)
    outer = (P[:, :, None] * Q[:, None, :]).reshape(n, 9)
    S = T.reshape(T.matmul(Ot, outer), (-1, 3, 3))
    centered = T.mul(T.reshape(W, (-1, 1, 1)),
                     T.mul(T.reshape(mu_p, (-1, 3, 1)), T.reshape(mu_q, (-1, 1, 3))))
    H = T.add(T.sub(S, centered), reg * np.eye(3, dtype=P.dtype))
    R = T.polar_rotation(H)
    tau = T.sub(mu_q, T.reshape(T.matmul(R, T.reshape(mu_p, (-1, 3, 1))), (-1, 3)))
    return R, tau


def dynamic_loss(P, P_moved, codes):
    """Mean over points of |sum_k o_pk (R_k p + tau_k) - p_moved|."""
    R, tau = fit_rigid(P, P_moved, codes)
    P = np.asarray(P, dtype=T.data_of(codes).dtype)
    # [K, N, 3]: every slot's rigid motion applied to every point
    moved = T.add(T.matmul(P[None], T.transpose(R, (0, 2, 1))), T.reshape(tau, (-1, 1, 3)))
    weights = T.reshape(T.transpose(codes), (-1, len(P), 1))
    pred = T.sum_(T.mul(weights, moved), axis=0)
    return T.mean(T.norm(T.sub(pred, np.asarray(P_moved, dtype=P.dtype)), axis=1))


def knn_indices(P, H):
    """H nearest neighbours of every point, excluding the point itself."""
    if len(P) <= H:
        raise ValueError(f"need more than {H} points for {H} neighbours")
    _, idx = cKDTree(P).query(P, k=H + 1)
    # drop self; with duplicate points self may not be first, so remove it explicitly
    own = np.arange(len(P))[:, None]
    out = np.empty((len(P), H), dtype=np.int64)
    for i, row in enumerate(idx):
        row = row[row != own[i, 0]]
        out[i] = row[:H]
    return out


def smooth_loss(P, codes, H=8, knn=None):
    """Mean over points and neighbours of the L1 distance between codes."""
    idx = knn_indices(np.asarray(P), H) if knn is None else knn
    n, k = T.data_of(codes).shape
    nb = T.reshape(T.take(codes, idx.ravel()), (n, H, k))
    diff = T.sub(T.reshape(codes, (n, 1, k)), nb)
    return T.mean(T.sum_(T.abs_(diff), axis=-1))


@dataclass
class DecompositionResult:
    objects: ObjectField
    points: np.ndarray
    motion: np.ndarray
    history: list

    def labels(self):
        return self.objects.labels(self.points)


def train_decomposition(model, cfg=DecompositionConfig(), points=None):
    """Fit h_Psi on the frozen fields of ``model``."""
    rng = np.random.default_rng(cfg.seed)
    P = sample_valid_points(model, cfg.resolution, cfg.sigma_valid) if points is None else np.asarray(points)
    if len(P) > cfg.batch:
        P = P[np.sort(rng.choice(len(P), cfg.batch, replace=False))]
    M = motion_vectors(P, model.velocity, cfg.dt, 0.0, cfg.n_ode)
    Q = P + M
    params = ParamStore(np.float64)
    objects = ObjectField.create(params, model.field.aabb, rng, k_obj=cfg.k_obj)
    knn = knn_indices(P, cfg.neighbors)
    adam = Adam(0.9, 0.999)
    history = []
    for it in range(cfg.iters):
        codes = objects.codes(P)
        l_dyn = dynamic_loss(P, Q, codes)
        l_smooth = smooth_loss(P, codes, cfg.neighbors, knn)
        loss = T.add(T.mul(l_dyn, cfg.w_dynamic), T.mul(l_smooth, cfg.w_smooth))
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"non-finite decomposition loss at iteration {it}")
        adam.update(params, gradient_of(loss, params), {"obj": cfg.lr})
        history.append({"iter": it, "dynamic": float(l_dyn.data), "smooth": float(l_smooth.data)})
    return DecompositionResult(objects, P, M, history)


def attach_objects(model, objects):
    """Copy the object field into ``model``'s parameters (for saving in one checkpoint)."""
    for name in objects.params.names(objects.prefix + "."):
        arr = objects.params[name]
        if name in model.params:
            model.params.replace(name, arr)
        else:
            model.params.add(name, arr, "obj")
    model.objects_meta = objects.meta()
    model.objects = ObjectField(model.params, model.field.aabb, **objects.meta())
    return model


def track_objects(points, labels, velocity, t, t0=0.0, n_ode=8):
    """Carry labelled points from ``t0`` to ``t``; labels ride along unchanged."""
    points = np.asarray(points)
    if t == t0:
        return points.copy(), np.asarray(labels).copy()
    with T.no_grad():
        moved = rk2_integrate(points.astype(np.float64), t0, t, velocity, step_count(t - t0, n_ode))
    return np.asarray(T.data_of(moved)), np.asarray(labels).copy()


def export_points_csv(path, points, labels):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x", "y", "z", "label"])
        for p, lab in zip(points, labels):
            w.writerow([f"{p[0]:.6f}", f"{p[1]:.6f}", f"{p[2]:.6f}", int(lab)])
