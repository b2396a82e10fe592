"""Volume compositing and pixel/mask rendering for keyframe and interframe times."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .diffcore import tape as T
from .sampling import rays_for_camera, stratified_samples
from .transport import rk2_integrate, step_count, transport_to_keyframes


def composite(colors, sigma, deltas):
    """Classical emission-absorption compositing over a black background.

    ``colors`` [..., S, 3], ``sigma`` [..., S], ``deltas`` [..., S].
    Returns ``(rgb, alpha, weights)``.
    """
    sd = T.mul(sigma, deltas)
    trans = T.exp(T.neg(T.cumsum_exclusive(sd, axis=-1)))
    weights = T.mul(trans, T.sub(1.0, T.exp(T.neg(sd))))
    rgb = T.sum_(T.mul(T.reshape(weights, T.data_of(weights).shape + (1,)), colors), axis=-2)
    return rgb, T.sum_(weights, axis=-1), weights


class OccupancyGrid:
    """Coarse mask of where any keyframe has non-negligible density.

    The mask is the union over keyframes, dilated by the largest distance
    transport can move a point to its keyframe, so samples outside it have
    zero density at every time and can be skipped.
    """

    def __init__(self, aabb, mask):
        self.aabb = np.asarray(aabb, dtype=np.float64).reshape(2, 3)
        self.mask = np.asarray(mask, dtype=bool)
        self.cell = (self.aabb[1] - self.aabb[0]) / np.array(self.mask.shape)

    @property
    def fraction(self):
        return float(self.mask.mean())

    def query(self, pts):
        idx = np.floor((np.asarray(pts, dtype=np.float64) - self.aabb[0]) / self.cell).astype(np.int64)
        idx = np.clip(idx, 0, np.array(self.mask.shape) - 1)
        return self.mask[idx[:, 0], idx[:, 1], idx[:, 2]]

    @classmethod
    def build(cls, model, resolution=32, sigma_min=0.1, t_max=1.0, n_times=5):
        field = model.field
        aabb = field.aabb
        g = (np.arange(resolution) + 0.5) / resolution
        axes = [aabb[0, i] + (aabb[1, i] - aabb[0, i]) * g for i in range(3)]
        centers = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3).astype(field.params.dtype)
        occ = np.zeros(len(centers), dtype=bool)
        with T.no_grad():
            for k in range(model.schedule.K):
                _, sigma = field.density(centers, np.full(len(centers), k))
                occ |= sigma.data >= sigma_min
        radius = 0.0
        if model.velocity is not None and occ.any():
            times = np.asarray(model.schedule.times)
            probe = np.linspace(0.0, max(t_max, times[-1]), 201)
            span = np.abs(probe[:, None] - times[None, :]).min(axis=1).max()
            speed = max(np.linalg.norm(model.velocity.numpy(centers[occ], t), axis=1).max()
                        for t in np.linspace(0.0, t_max, n_times))
            # doubled: transported points may pass through regions where the field is faster
            radius = 2.0 * float(speed) * float(span)
        cell = (aabb[1] - aabb[0]) / resolution
        steps = np.ceil(radius / cell).astype(int) + 1
        mask = occ.reshape((resolution,) * 3)
        if mask.any():
            zz, yy, xx = np.meshgrid(*[np.arange(-s, s + 1) for s in steps], indexing="ij")
            ball = (zz * cell[0]) ** 2 + (yy * cell[1]) ** 2 + (xx * cell[2]) ** 2 <= (radius + cell.max()) ** 2
            mask = ndimage.binary_dilation(mask, structure=ball)
        return cls(aabb, mask)


class Model:
    """The pieces a renderer needs: radiance field, velocity field, settings."""

    def __init__(self, field, velocity=None, n_ode=8):
        self.field = field
        self.velocity = velocity
        self.n_ode = n_ode
        self.occupancy = None

    @property
    def schedule(self):
        return self.field.schedule


def _sample_points(rays, n_samples, rng, dtype):
    depths, deltas = stratified_samples(rays.near, rays.far, n_samples, rng)
    pts = rays.origins[:, None, :] + rays.dirs[:, None, :] * depths[..., None]
    return pts.reshape(-1, 3).astype(dtype), deltas.astype(dtype)


def render_rays(model, rays, n_samples, rng=None, interframe=True, color_threshold=0.0):
    """Render a ray batch; each ray carries its own time in ``rays.t``.

    With ``interframe`` the samples go through the keyframe transport (a ray
    whose time is a keyframe time is transported over a zero span, i.e. read
    directly); without it the times must be keyframe times.  Colors are only
    decoded where the compositing weight exceeds ``color_threshold``
    (0 decodes everything).  Returns a dict with rgb [R, 3], alpha [R],
    weights [R, S].
    """
    field = model.field
    dtype = field.params.dtype
    if not np.all(rays.valid):
        return _render_valid_only(model, rays, n_samples, rng, interframe, color_threshold)
    R = len(rays)
    pts, deltas = _sample_points(rays, n_samples, rng, dtype)
    t = np.repeat(rays.t, n_samples)
    occ = getattr(model, "occupancy", None)
    keep = np.arange(R * n_samples) if occ is None else np.flatnonzero(occ.query(pts))
    pk, tk = pts[keep], t[keep]
    if interframe and model.velocity is not None:
        moved, k = transport_to_keyframes(pk, tk, model.schedule, model.velocity, model.n_ode)
    else:
        k = model.schedule.index_of(tk)
        if len(tk) and not np.allclose(model.schedule.time_of(k), tk, atol=1e-9):
            raise ValueError("keyframe rendering requested at a non-keyframe time")
        moved = pk
    if len(keep):
        u = field.normalize(moved)
        _, sigma_k = field.density(moved, k, normalized=u)
        if occ is None:
            sigma = T.reshape(sigma_k, (R, n_samples))
        else:
            sigma = T.reshape(T.scatter_add(sigma_k, keep, R * n_samples), (R, n_samples))
    else:
        sigma = T.Var(np.zeros((R, n_samples), dtype=dtype))
    sd = T.mul(sigma, deltas)
    trans = T.exp(T.neg(T.cumsum_exclusive(sd, axis=-1)))
    weights = T.mul(trans, T.sub(1.0, T.exp(T.neg(sd))))
    flat_w = T.reshape(weights, (R * n_samples,))
    local = np.flatnonzero(flat_w.data[keep] > color_threshold) if color_threshold > 0 else np.arange(len(keep))
    sel = keep[local]
    ray_of = sel // n_samples
    if len(sel):
        u_sel = T.take(u, local)
        e = field.appearance(None, k[local], normalized=u_sel)
        c = field.decode_color(e, rays.dirs[ray_of])
        contrib = T.mul(T.reshape(T.take(flat_w, sel), (len(sel), 1)), c)
        rgb = T.scatter_add(contrib, ray_of, R)
    else:
        rgb = T.Var(np.zeros((R, 3), dtype=dtype))
    return {"rgb": rgb, "alpha": T.sum_(weights, axis=-1), "weights": weights, "points": pts}


def _render_valid_only(model, rays, n_samples, rng, interframe, color_threshold):
    """Rays that miss the AABB see only background: render the rest and scatter back."""
    R = len(rays)
    hit = np.flatnonzero(rays.valid)
    dtype = model.field.params.dtype
    pts = np.broadcast_to(rays.origins[:, None, :], (R, n_samples, 3)).reshape(-1, 3).astype(dtype)
    if len(hit) == 0:
        zeros = T.Var(np.zeros((R, 3), dtype=dtype))
        return {"rgb": zeros, "alpha": T.Var(np.zeros(R, dtype=dtype)),
                "weights": T.Var(np.zeros((R, n_samples), dtype=dtype)), "points": pts}
    sub = render_rays(model, rays.subset(hit), n_samples, rng, interframe, color_threshold)
    pts = pts.reshape(R, n_samples, 3).copy()
    pts[hit] = sub["points"].reshape(len(hit), n_samples, 3)
    return {"rgb": T.scatter_add(sub["rgb"], hit, R), "alpha": T.scatter_add(sub["alpha"], hit, R),
            "weights": T.scatter_add(sub["weights"], hit, R), "points": pts.reshape(-1, 3)}


def render_keyframe_pixels(model, rays, n_samples, rng=None, color_threshold=0.0):
    return render_rays(model, rays, n_samples, rng, interframe=False, color_threshold=color_threshold)


def render_interframe_pixels(model, rays, n_samples, rng=None, color_threshold=0.0):
    return render_rays(model, rays, n_samples, rng, interframe=True, color_threshold=color_threshold)


def render_image(model, camera, t, n_samples, chunk=2048, color_threshold=1e-4):
    """Full image at time ``t`` (keyframe path at keyframe times, transport otherwise)."""
    rays = rays_for_camera(camera, t, model.field.aabb)
    interframe = not model.schedule.is_keyframe(t)
    out = np.zeros((len(rays), 3))
    with T.no_grad():
        for s in range(0, len(rays), chunk):
            idx = np.arange(s, min(s + chunk, len(rays)))
            res = render_rays(model, rays.subset(idx), n_samples, None, interframe, color_threshold)
            out[idx] = res["rgb"].data
    return np.clip(out, 0, 1).reshape(camera.height, camera.width, 3)


def render_object_masks(model, objects, camera, t, n_samples, chunk=2048, alpha_threshold=0.5):
    """Per-pixel object labels: 0 background, 1..K_obj otherwise.

    Ray samples at ``t`` are carried back to t = 0, where the object field is
    defined; per-ray codes are the compositing-weighted sum of point codes.
    """
    rays = rays_for_camera(camera, t, model.field.aabb)
    labels = np.zeros(len(rays), dtype=np.uint8)
    dtype = model.field.params.dtype
    with T.no_grad():
        for s in range(0, len(rays), chunk):
            idx = np.arange(s, min(s + chunk, len(rays)))
            sub = rays.subset(idx)
            res = render_rays(model, sub, n_samples, None, interframe=True, color_threshold=1.0)
            w = res["weights"].data
            pts = res["points"]
            if t != 0 and model.velocity is not None:
                steps = step_count(t, model.n_ode)
                pts = rk2_integrate(pts, t, 0.0, model.velocity, steps)
            codes = objects.codes(T.data_of(pts).astype(dtype)).data.reshape(len(idx), n_samples, -1)
            ray_codes = (w[..., None] * codes).sum(axis=1)
            lab = np.argmax(ray_codes, axis=-1).astype(np.uint8) + 1
            lab[w.sum(axis=1) < alpha_threshold] = 0
            labels[idx] = lab
    return labels.reshape(camera.height, camera.width)
