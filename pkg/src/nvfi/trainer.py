"""Joint keyframe + interframe optimization, checkpoints and motion transfer."""
from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import physics
from .diffcore import tape as T
from .diffcore.checkpoint import load_checkpoint, save_checkpoint
from .diffcore.params import Adam, ParamStore, gradient_of, lr_schedule
from .keyframe_field import KeyframeField, KeyframeSchedule
from .renderer import Model, OccupancyGrid, render_rays
from .sampling import Rays, pixel_grid, rays_for_pixels, spacetime_samples
from .scene_io import load_frames, load_manifest
from .velocity_field import AccelerationField, VelocityField

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("iter", "l_key", "l_inter", "l_div", "l_mom", "tv", "total", "ms")


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainConfig:
    iters: int = 3000
    keyframe_rays: int = 1024
    interframe_rays: int = 1024
    lr_planes: float = 0.02
    lr_mlp: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.99
    lambda_tv: float = 0.001
    lambda_div: float = 5.0
    lambda_mom: float = 0.1
    keyframes: int = 4
    samples_per_ray: int = 64
    physics_samples: int = 16384
    grid_resolutions: list = field(default_factory=lambda: [16, 20, 25, 31, 39, 48])
    grid_fractions: list = field(default_factory=lambda: [1 / 15, 2 / 15, 3 / 15, 4 / 15, 5 / 15])
    t_max: float = 1.0
    n_ode: int = 8
    h_fd: float = 1e-3
    seed: int = 0
    joint: bool = True
    physics: bool = True
    # feature-plane / decoder sizes
    n_density: int = 24
    n_app: int = 48
    feat_dim: int = 24
    hidden: int = 128
    # added to the summed density features before softplus
    density_shift: float = -5.0
    # skip color decoding for samples whose compositing weight is below this
    color_threshold: float = 1e-4
    checkpoint_every: int = 0
    # empty-space skipping: rebuild the occupancy mask every this many iterations (0 disables)
    occupancy_every: int = 100
    occupancy_sigma: float = 0.1
    occupancy_resolution: int = 32
    # when set, train a single-keyframe static field from the frames at this time only
    static_time: float | None = None
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("lr_planes", "lr_mlp"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.keyframes < 1:
            raise ValueError("keyframes must be >= 1")
        if self.iters < 0:
            raise ValueError("iters must be >= 0")
        res = list(self.grid_resolutions)
        if any(b < a for a, b in zip(res, res[1:])):
            raise ValueError("grid resolutions must be non-decreasing")
        if len(self.grid_fractions) != len(res) - 1:
            raise ValueError("need one upsampling fraction per resolution step")
        if not 0 < self.t_max:
            raise ValueError("t_max must be positive")

    @property
    def lambdas(self):
        if not self.physics:
            return 0.0, 0.0
        return self.lambda_div, self.lambda_mom

    def to_json(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return cls.from_dict(tomllib.load(f))


class NVFiModel(Model):
    """Parameters plus the fields built on them."""

    def __init__(self, params, schedule, aabb, config, objects_meta=None):
        self.params = params
        self.config = config
        self.aabb = np.asarray(aabb, dtype=np.float64).reshape(2, 3)
        field_ = KeyframeField(params, schedule, self.aabb, n_density=config.n_density, n_app=config.n_app,
                               feat_dim=config.feat_dim, hidden=config.hidden,
                               density_shift=config.density_shift)
        velocity = VelocityField(params, self.aabb) if "vel.0.w" in params else None
        super().__init__(field_, velocity, config.n_ode)
        self.acceleration = AccelerationField(params, self.aabb) if "acc.0.w" in params else None
        self.objects_meta = objects_meta
        self.objects = None
        if objects_meta:
            from .decomposition import ObjectField
            self.objects = ObjectField(params, self.aabb, **objects_meta)

    @classmethod
    def create(cls, schedule, aabb, config, rng, resolution=None, with_velocity=True):
        params = ParamStore(np.dtype(config.dtype))
        KeyframeField.create(params, schedule, aabb, resolution or config.grid_resolutions[0], rng,
                             n_density=config.n_density, n_app=config.n_app, feat_dim=config.feat_dim,
                             hidden=config.hidden)
        if with_velocity:
            VelocityField.create(params, aabb, rng)
            AccelerationField.create(params, aabb, rng)
        return cls(params, schedule, aabb, config)

    def refresh_occupancy(self):
        if self.config.occupancy_every:
            self.occupancy = OccupancyGrid.build(self, self.config.occupancy_resolution,
                                                 self.config.occupancy_sigma, self.config.t_max)
        return self.occupancy

    def meta(self):
        d = {"schedule": self.schedule.to_json(), "aabb": self.aabb.tolist()}
        if self.objects_meta is not None:
            d["objects"] = self.objects_meta
        return d

    def save(self, path, iteration=0):
        save_checkpoint(path, self.params, self.meta(), iteration, self.config.to_json())

    @classmethod
    def load(cls, path):
        params, header = load_checkpoint(path)
        meta = header["meta"]
        config = TrainConfig.from_dict(header["config"])
        model = cls(params, KeyframeSchedule.from_json(meta["schedule"]), meta["aabb"], config,
                    meta.get("objects"))
        model.refresh_occupancy()
        return model


# ----------------------------------------------------------------------------
# training data


class RayPool:
    """Precomputed rays and target colors for a set of frames."""

    def __init__(self, cameras, images, aabb):
        """``images`` maps (camera id, time) -> HxWx3."""
        self.keys = list(images)
        self.times = np.array([t for _, t in self.keys])
        self._rays = {}
        for cam in cameras:
            r = rays_for_pixels(cam, pixel_grid(cam.width, cam.height), 0.0, aabb)
            self._rays[cam.id] = r
        self.targets = [np.asarray(images[k], dtype=np.float64).reshape(-1, 3) for k in self.keys]
        self.cams = [k[0] for k in self.keys]

    def __len__(self):
        return len(self.keys)

    def sample(self, n, rng):
        frame = rng.integers(0, len(self.keys), n)
        out_o, out_d, out_n, out_f, out_v, out_px, out_t, out_c = ([] for _ in range(8))
        for i in np.unique(frame):
            sel = frame == i
            r = self._rays[self.cams[i]]
            pix = rng.integers(0, len(r), int(sel.sum()))
            out_o.append(r.origins[pix])
            out_d.append(r.dirs[pix])
            out_n.append(r.near[pix])
            out_f.append(r.far[pix])
            out_v.append(r.valid[pix])
            out_px.append(r.pixels[pix])
            out_t.append(np.full(len(pix), self.times[i]))
            out_c.append(self.targets[i][pix])
        cat = np.concatenate
        rays = Rays(cat(out_o), cat(out_d), cat(out_n), cat(out_f), cat(out_v), cat(out_px), cat(out_t))
        return rays, cat(out_c)


def split_frames(manifest, images, schedule):
    """Training frames keyed by (camera, t), separated into keyframe and interframe sets."""
    key, inter = {}, {}
    for (cam_id, j), img in images.items():
        t = j / (manifest.n_stamps - 1) if manifest.n_stamps > 1 else 0.0
        target = key if schedule.is_keyframe(t) else inter
        target[(cam_id, t)] = img
    return key, inter


# ----------------------------------------------------------------------------
# losses


def photometric(rgb, target):
    diff = T.sub(rgb, target.astype(T.data_of(rgb).dtype))
    return T.mean(T.mul(diff, diff))


def keyframe_loss(model, rays, target, cfg, rng=None):
    out = render_rays(model, rays, cfg.samples_per_ray, rng, interframe=False,
                      color_threshold=cfg.color_threshold)
    return photometric(out["rgb"], target)


def interframe_loss(model, rays, target, cfg, rng=None):
    out = render_rays(model, rays, cfg.samples_per_ray, rng, interframe=True,
                      color_threshold=cfg.color_threshold)
    return photometric(out["rgb"], target)


def physics_batch(model, cfg, rng):
    """Space-time samples in occupied space (density read at the nearest keyframe)."""
    p, t = spacetime_samples(cfg.physics_samples, model.aabb, cfg.t_max, rng)
    keep = physics.occupied_filter(p, t, model.field, physics.PhysicsConfig(h_fd=cfg.h_fd))
    return p[keep].astype(model.params.dtype), t[keep]


def physics_terms(model, p, t, cfg):
    return physics.physics_losses(p, t, model.velocity, model.acceleration, cfg.h_fd)


def total_loss(model, batch, cfg, rng=None, terms=("key", "inter", "tv", "phys")):
    """Weighted sum of the requested terms; returns (total, {name: Var})."""
    parts = {}
    zero = T.Var(np.zeros((), dtype=model.params.dtype))
    if "key" in terms and batch.get("key") is not None:
        parts["l_key"] = keyframe_loss(model, *batch["key"], cfg, rng)
    if "inter" in terms and batch.get("inter") is not None:
        parts["l_inter"] = interframe_loss(model, *batch["inter"], cfg, rng)
    if "tv" in terms:
        parts["tv"] = model.field.tv_loss()
    lam_div, lam_mom = cfg.lambdas
    if "phys" in terms and batch.get("phys") is not None and (lam_div or lam_mom):
        parts["l_div"], parts["l_mom"] = physics_terms(model, *batch["phys"], cfg)
    total = zero
    weights = {"l_key": 1.0, "l_inter": 1.0, "tv": cfg.lambda_tv, "l_div": lam_div, "l_mom": lam_mom}
    for name, v in parts.items():
        total = T.add(total, T.mul(v, weights[name]))
    for name, v in parts.items():
        if not np.isfinite(v.data):
            raise TrainingDiverged(f"non-finite loss term {name}")
    return total, parts


# ----------------------------------------------------------------------------
# loop


def upsample_iterations(cfg, iters):
    return {int(round(f * iters)): r for f, r in zip(cfg.grid_fractions, cfg.grid_resolutions[1:])}


def make_schedule(manifest, cfg):
    train_times = manifest.train_times()
    if not train_times:
        raise ValueError("manifest has no training frames")
    if cfg.static_time is not None:
        return KeyframeSchedule((float(cfg.static_time),), float(max(train_times)))
    return KeyframeSchedule.uniform(cfg.keyframes, float(max(train_times)), stamps=train_times)


class Trainer:
    def __init__(self, manifest, cfg, images=None, log_path=None, ckpt_path=None):
        self.manifest = manifest
        self.cfg = cfg
        if images is None:
            images, _ = load_frames(manifest, "train")
        else:
            images = {k: v for k, v in images.items() if _is_train(manifest, k)}
        self.schedule = make_schedule(manifest, cfg)
        if cfg.static_time is not None:
            j = manifest.stamp_index(cfg.static_time)
            images = {k: v for k, v in images.items() if k[1] == j}
        init_rng = np.random.default_rng(cfg.seed)
        self.rng = np.random.default_rng([cfg.seed, 1])
        self.model = NVFiModel.create(self.schedule, manifest.aabb, cfg, init_rng,
                                      with_velocity=cfg.static_time is None)
        key, inter = split_frames(manifest, images, self.schedule)
        if not key:
            raise ValueError("no training frames fall on keyframe times")
        self.key_pool = RayPool(manifest.cameras, key, manifest.aabb)
        self.inter_pool = RayPool(manifest.cameras, inter, manifest.aabb) if inter else None
        if self.model.velocity is None:
            self.inter_pool = None
        self.adam = Adam(cfg.beta1, cfg.beta2)
        self.history = []
        self.log_path = log_path
        self.ckpt_path = ckpt_path
        self._last_good = None

    def lr_groups(self, it, total):
        mlp = lr_schedule(it, total, self.cfg.lr_mlp)
        return {"planes": lr_schedule(it, total, self.cfg.lr_planes), "decoder": mlp, "vel": mlp, "acc": mlp}

    def batch(self, with_key=True, with_inter=True, with_phys=True):
        cfg = self.cfg
        b = {}
        if with_key:
            b["key"] = self.key_pool.sample(cfg.keyframe_rays, self.rng)
        if with_inter and self.inter_pool is not None:
            b["inter"] = self.inter_pool.sample(cfg.interframe_rays, self.rng)
        if with_phys and self.model.velocity is not None and any(cfg.lambdas):
            b["phys"] = physics_batch(self.model, cfg, self.rng)
        return b

    def step(self, it, total, terms, trainable):
        t0 = time.perf_counter()
        cfg = self.cfg
        b = self.batch("key" in terms, "inter" in terms, "phys" in terms)
        loss, parts = total_loss(self.model, b, cfg, self.rng, terms)
        if not np.isfinite(loss.data) or float(loss.data) > 1e6:
            raise TrainingDiverged(f"loss {float(loss.data)} at iteration {it}", self._last_good)
        grads = gradient_of(loss, self.model.params)
        grads = {n: g for n, g in grads.items() if n.startswith(trainable)}
        self.adam.update(self.model.params, grads, self.lr_groups(it, total))
        row = {"iter": it, "total": float(loss.data), "ms": (time.perf_counter() - t0) * 1000}
        for name in LOSS_COLUMNS[1:6]:
            row[name] = float(parts[name].data) if name in parts else 0.0
        self.history.append(row)
        if (it + 1) % 100 == 0:
            log.info("iter %d/%d loss %.5f (%.0f ms)", it + 1, total, row["total"], row["ms"])
        return row

    def _maybe_upsample(self, it, ups):
        if it in ups:
            changed = self.model.field.upsample(ups[it])
            self.adam.reset(changed)
        every = self.cfg.occupancy_every
        if every and it and it % every == 0:
            self.model.refresh_occupancy()

    def _checkpoint(self, it):
        if self.cfg.checkpoint_every and self.ckpt_path and it and it % self.cfg.checkpoint_every == 0:
            self.model.save(self.ckpt_path, it)
            self._last_good = str(self.ckpt_path)

    def run(self):
        cfg = self.cfg
        n = cfg.iters
        if cfg.joint or self.model.velocity is None:
            ups = upsample_iterations(cfg, n)
            for it in range(n):
                self._maybe_upsample(it, ups)
                self.step(it, n, ("key", "inter", "tv", "phys"), ("kf.", "vel.", "acc."))
                self._checkpoint(it)
        else:
            # stage one: the radiance field from keyframes alone
            ups = upsample_iterations(cfg, n)
            for it in range(n):
                self._maybe_upsample(it, ups)
                self.step(it, n, ("key", "tv"), ("kf.",))
            # stage two: motion from interframes and physics with the radiance field frozen
            with self.model.params.freeze("kf."):
                for it in range(n):
                    self._maybe_upsample(it, {})
                    self.step(it, n, ("inter", "phys"), ("vel.", "acc."))
        self.model.refresh_occupancy()
        if self.log_path:
            write_loss_csv(self.history, self.log_path)
        if self.ckpt_path:
            self.model.save(self.ckpt_path, len(self.history))
        return self.model


def _is_train(manifest, key):
    cam_id, j = key
    t = j / (manifest.n_stamps - 1) if manifest.n_stamps > 1 else 0.0
    return any(f.cam == cam_id and abs(f.t - t) < 1e-9 and f.split == "train" for f in manifest.frames)


def train(manifest, cfg, images=None, log_path=None, ckpt_path=None):
    """Train from a manifest (or a directory holding one); returns (model, loss history)."""
    if isinstance(manifest, (str, Path)):
        manifest = load_manifest(manifest)
    tr = Trainer(manifest, cfg, images, log_path, ckpt_path)
    try:
        model = tr.run()
    except TrainingDiverged as exc:
        if tr.history and ckpt_path and exc.last_good is None:
            log.error("training diverged: %s", exc)
        raise
    return model, tr.history


def write_loss_csv(history, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOSS_COLUMNS)
        w.writeheader()
        for row in history:
            w.writerow({k: (row[k] if k == "iter" else f"{row[k]:.8g}") for k in LOSS_COLUMNS})


# ----------------------------------------------------------------------------
# motion transfer


def attach_velocity(static, moving):
    """Put the velocity and acceleration fields of ``moving`` onto a single-keyframe static model."""
    if static.schedule.K != 1:
        raise ValueError(f"static model must have exactly one keyframe, found {static.schedule.K}")
    params = static.params.copy()
    for prefix in ("vel.", "acc."):
        names = moving.params.names(prefix)
        if not names:
            raise ValueError(f"velocity checkpoint has no {prefix[:-1]} entries")
        for name in names:
            src = moving.params[name]
            if name in params:
                if params[name].shape != src.shape:
                    raise ValueError(f"shape mismatch for {name}: {params[name].shape} vs {src.shape}")
                params.set(name, src)
            else:
                params.add(name, src, moving.params.groups[name])
    cfg = dataclasses.replace(static.config, n_ode=moving.config.n_ode)
    if not np.allclose(static.aabb, moving.aabb):
        log.warning("attaching a velocity field trained in a different AABB")
    return NVFiModel(params, static.schedule, static.aabb, cfg)
