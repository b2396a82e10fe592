"""Ray generation, stratified depth samples and space-time PINN samples."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Rays:
    origins: np.ndarray  # [R, 3]
    dirs: np.ndarray  # [R, 3], unit length
    near: np.ndarray  # [R]
    far: np.ndarray  # [R]
    valid: np.ndarray  # [R] bool, False when the ray misses the AABB
    pixels: np.ndarray  # [R, 2] (px, py)
    t: np.ndarray  # [R]

    def __len__(self):
        return len(self.origins)

    def subset(self, idx):
        return Rays(self.origins[idx], self.dirs[idx], self.near[idx], self.far[idx],
                    self.valid[idx], self.pixels[idx], self.t[idx])


def aabb_intersect(origins, dirs, aabb):
    """Slab test; returns (near, far, hit) with near clipped at 0."""
    safe = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    t0 = (aabb[0] - origins) / safe
    t1 = (aabb[1] - origins) / safe
    near = np.maximum(np.minimum(t0, t1).max(axis=-1), 0.0)
    far = np.maximum(t0, t1).min(axis=-1)
    return near, far, far > near


def rays_for_pixels(camera, pixels, t, aabb):
    """Pinhole rays through pixel centers, clipped to the AABB.

    ``pixels`` is an [N, 2] integer array of (px, py).
    """
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    px, py = pixels[:, 0], pixels[:, 1]
    if np.any(px < 0) or np.any(px >= camera.width) or np.any(py < 0) or np.any(py >= camera.height):
        raise ValueError(f"pixel outside the {camera.width}x{camera.height} image of camera {camera.id}")
    d_cam = np.stack([(px + 0.5 - camera.cx) / camera.fx,
                      (py + 0.5 - camera.cy) / camera.fy,
                      np.ones(len(pixels))], axis=-1)
    dirs = d_cam @ camera.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.center, dirs.shape).copy()
    near, far, hit = aabb_intersect(origins, dirs, np.asarray(aabb, dtype=np.float64))
    far = np.where(hit, far, near)
    ts = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(pixels),)).copy()
    return Rays(origins, dirs, near, far, hit, pixels, ts)


def pixel_grid(width, height):
    py, px = np.mgrid[0:height, 0:width]
    return np.stack([px.ravel(), py.ravel()], axis=-1)


def rays_for_camera(camera, t, aabb):
    """All pixels of ``camera`` in row-major order."""
    return rays_for_pixels(camera, pixel_grid(camera.width, camera.height), t, aabb)


def stratified_samples(near, far, n_samples, rng=None):
    """Stratified depths in [near, far] and segment lengths.

    Without ``rng`` each depth sits at its stratum midpoint.  The last segment
    runs to ``far``.  Empty intervals (near == far) yield zero-length segments.
    """
    near = np.asarray(near, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)
    if n_samples < 1:
        raise ValueError("need at least one sample per ray")
    span = (far - near)[..., None]
    frac = np.arange(n_samples) / n_samples
    jitter = 0.5 if rng is None else rng.random(near.shape + (n_samples,))
    depths = near[..., None] + span * (frac + jitter / n_samples)
    deltas = np.empty_like(depths)
    deltas[..., :-1] = np.diff(depths, axis=-1)
    deltas[..., -1] = far - depths[..., -1]
    return depths, deltas


def spacetime_samples(n, aabb, t_max, rng):
    """Points uniform in the AABB and times uniform in [0, t_max]."""
    aabb = np.asarray(aabb, dtype=np.float64)
    p = aabb[0] + (aabb[1] - aabb[0]) * rng.random((n, 3))
    t = t_max * rng.random(n)
    return p, t
