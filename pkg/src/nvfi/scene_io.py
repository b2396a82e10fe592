"""Dataset manifest, PPM/PGM image IO and the analytic dynamic-scene generator.

The generator renders rigid spheres and boxes moving under a constant twist or
a constant-acceleration fall, with the same compositing rule the learned
renderer uses, and keeps the closed-form velocity for validation.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SPLITS = ("train", "test-interp", "test-extrap")


class SceneError(ValueError):
    pass


class ManifestError(ValueError):
    pass


class ImageFormatError(ValueError):
    def __init__(self, path, offset, reason):
        self.offset = offset
        super().__init__(f"{path}: {reason} at byte {offset}")


# ----------------------------------------------------------------------------
# cameras and frames


@dataclass
class CameraModel:
    id: int
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # camera-to-world, columns = right, down, forward
    translation: np.ndarray  # camera center in world units

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ManifestError(f"camera {self.id}: focal lengths must be positive")
        R = self.rotation
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1) > 1e-6:
            raise ManifestError(f"camera {self.id}: rotation is not a proper rotation")

    @property
    def center(self):
        return self.translation

    @property
    def c2w(self):
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1)

    @classmethod
    def look_at(cls, cam_id, eye, target, width, height, fov_deg, up=(0.0, 0.0, 1.0)):
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, (0.0, 1.0, 0.0))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        focal = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(cam_id, focal, focal, width / 2, height / 2, width, height,
                   np.stack([right, down, forward], axis=1), eye)

    def to_json(self):
        return {"id": self.id, "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "w": self.width, "h": self.height, "c2w": self.c2w.reshape(-1).tolist()}

    @classmethod
    def from_json(cls, d):
        c2w = np.asarray(d["c2w"], dtype=np.float64).reshape(3, 4)
        return cls(int(d["id"]), float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["w"]), int(d["h"]), c2w[:, :3], c2w[:, 3])


def orbit_cameras(n, radius=3.0, width=48, height=48, fov_deg=50.0, elevation=(15.0, 55.0),
                  start_id=0, phase=0.0):
    """``n`` cameras spread in azimuth on a sphere, alternating elevation, all facing the origin."""
    lo, hi = elevation
    cams = []
    for i in range(n):
        az = 2 * math.pi * i / n + phase
        el = math.radians(lo if i % 2 == 0 else hi)
        eye = radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        cams.append(CameraModel.look_at(start_id + i, eye, (0.0, 0.0, 0.0), width, height, fov_deg))
    return cams


@dataclass
class FrameRecord:
    cam: int
    t: float
    image: str
    split: str = "train"
    mask: str | None = None

    def to_json(self):
        d = {"cam": self.cam, "t": self.t, "image": self.image, "split": self.split}
        if self.mask is not None:
            d["mask"] = self.mask
        return d


@dataclass
class SceneManifest:
    cameras: list
    frames: list
    aabb: np.ndarray = field(default_factory=lambda: np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]]))
    near: float = 0.1
    far: float = 6.0
    n_stamps: int = 60
    motion: dict | None = None
    root: Path | None = None

    def __post_init__(self):
        self.aabb = np.asarray(self.aabb, dtype=np.float64).reshape(2, 3)
        self.validate()

    def validate(self):
        if np.any(self.aabb[1] <= self.aabb[0]):
            raise ManifestError("AABB is degenerate")
        if not self.near < self.far:
            raise ManifestError("near must be smaller than far")
        ids = {c.id for c in self.cameras}
        if len(ids) != len(self.cameras):
            raise ManifestError("duplicate camera ids")
        for i, fr in enumerate(self.frames):
            if fr.cam not in ids:
                raise ManifestError(f"frame {i} ({fr.image}) references unknown camera id {fr.cam}")
            if fr.split not in SPLITS:
                raise ManifestError(f"frame {i} ({fr.image}) has unknown split {fr.split!r}")
            idx = fr.t * (self.n_stamps - 1)
            if not -1e-9 <= fr.t <= 1 + 1e-9 or abs(idx - round(idx)) > 1e-6:
                raise ManifestError(f"frame {i} ({fr.image}) time {fr.t} is not on the {self.n_stamps}-stamp grid")

    def camera(self, cam_id):
        for c in self.cameras:
            if c.id == cam_id:
                return c
        raise KeyError(cam_id)

    def split(self, name):
        return [f for f in self.frames if f.split == name]

    def stamp_index(self, t):
        return int(round(t * (self.n_stamps - 1)))

    def train_times(self):
        return sorted({f.t for f in self.frames if f.split == "train"})

    def path(self, rel):
        return Path(rel) if self.root is None else self.root / rel

    def to_json(self):
        d = {
            "cameras": [c.to_json() for c in self.cameras],
            "frames": [f.to_json() for f in self.frames],
            "aabb": {"min": self.aabb[0].tolist(), "max": self.aabb[1].tolist()},
            "near": self.near,
            "far": self.far,
            "n_stamps": self.n_stamps,
        }
        if self.motion is not None:
            d["motion"] = self.motion
        return d


def stamp_times(n_stamps):
    return [j / (n_stamps - 1) for j in range(n_stamps)] if n_stamps > 1 else [0.0]


def save_manifest(manifest, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_json(), indent=1))


def load_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    d = json.loads(path.read_text())
    try:
        cams = [CameraModel.from_json(c) for c in d["cameras"]]
        frames = [FrameRecord(int(f["cam"]), float(f["t"]), f["image"], f.get("split", "train"), f.get("mask"))
                  for f in d["frames"]]
        aabb = np.array([d["aabb"]["min"], d["aabb"]["max"]], dtype=np.float64)
    except KeyError as exc:
        raise ManifestError(f"{path}: missing field {exc}") from None
    return SceneManifest(cams, frames, aabb, float(d["near"]), float(d["far"]), int(d["n_stamps"]),
                         d.get("motion"), path.parent)


# ----------------------------------------------------------------------------
# PPM / PGM


def _quantize(array):
    return np.floor(np.clip(np.asarray(array, dtype=np.float64), 0.0, 1.0) * 255 + 0.5).astype(np.uint8)


def write_image(array, path):
    """Binary PPM (P6) for HxWx3 arrays in [0, 1], PGM (P5) for HxW."""
    array = np.asarray(array)
    data = array.astype(np.uint8) if array.dtype == np.uint8 else _quantize(array)
    if data.ndim == 2:
        magic = b"P5"
    elif data.ndim == 3 and data.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"unsupported image shape {array.shape}")
    h, w = data.shape[:2]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(magic + f"\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(data).tobytes())


def write_labels(labels, path):
    write_image(np.asarray(labels, dtype=np.uint8), path)


def _read_pnm(path):
    raw = Path(path).read_bytes()
    if raw[:2] not in (b"P5", b"P6"):
        raise ImageFormatError(path, 0, f"unknown magic {raw[:2]!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageFormatError(path, pos, "malformed header")
        fields.append(int(raw[start:pos]))
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise ImageFormatError(path, pos, "malformed header")
    pos += 1
    w, h, maxval = fields
    if maxval != 255 or w <= 0 or h <= 0:
        raise ImageFormatError(path, pos, f"unsupported header {w}x{h} maxval {maxval}")
    channels = 3 if raw[:2] == b"P6" else 1
    need = w * h * channels
    if len(raw) - pos < need:
        raise ImageFormatError(path, len(raw), f"truncated payload (expected {need} bytes from offset {pos})")
    data = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos)
    return data.reshape((h, w, 3) if channels == 3 else (h, w))


def read_image(path):
    """Float image in [0, 1]; HxWx3 for P6, HxW for P5."""
    return _read_pnm(path).astype(np.float32) / 255.0


def read_labels(path):
    return _read_pnm(path).copy()


# ----------------------------------------------------------------------------
# analytic scenes


def rotation_exp(omega, t):
    """Rotation matrix exp([omega]_x t) (Rodrigues)."""
    w = np.asarray(omega, dtype=np.float64) * t
    theta = np.linalg.norm(w)
    if theta < 1e-15:
        return np.eye(3)
    k = w / theta
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(theta) * K + (1 - math.cos(theta)) * K @ K


@dataclass
class RigidBody:
    shape: str  # "sphere" | "box"
    center: np.ndarray
    sigma: float = 50.0
    color: tuple = (0.8, 0.8, 0.8)
    radius: float = 0.25
    half_extents: np.ndarray = field(default_factory=lambda: np.full(3, 0.25))
    orientation: np.ndarray = field(default_factory=lambda: np.eye(3))
    motion: str = "twist"  # "twist" | "fall"
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))  # u, or u0 for falls
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))
    pivot: np.ndarray | None = None
    gravity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.half_extents = np.asarray(self.half_extents, dtype=np.float64)
        self.orientation = np.asarray(self.orientation, dtype=np.float64).reshape(3, 3)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        self.omega = np.asarray(self.omega, dtype=np.float64)
        self.gravity = np.asarray(self.gravity, dtype=np.float64)
        self.pivot = self.center.copy() if self.pivot is None else np.asarray(self.pivot, dtype=np.float64)
        if self.shape not in ("sphere", "box"):
            raise SceneError(f"unknown shape {self.shape!r}")
        if self.motion not in ("twist", "fall"):
            raise SceneError(f"unknown motion {self.motion!r}")
        if self.sigma <= 0:
            raise SceneError("body density must be positive")

    def pose(self, t):
        """(R, offset) with world = R @ (rest - pivot0) + pivot0 + offset."""
        if self.motion == "fall":
            return np.eye(3), self.velocity * t + 0.5 * self.gravity * t * t
        return rotation_exp(self.omega, t), self.velocity * t

    def to_rest(self, p, t):
        R, off = self.pose(t)
        return (p - self.pivot - off) @ R + self.pivot

    def contains(self, p, t):
        x = self.to_rest(np.asarray(p, dtype=np.float64), t) - self.center
        if self.shape == "sphere":
            return np.einsum("...i,...i->...", x, x) <= self.radius ** 2
        local = x @ self.orientation
        return np.all(np.abs(local) <= self.half_extents, axis=-1)

    def velocity_at(self, p, t):
        p = np.asarray(p, dtype=np.float64)
        if self.motion == "fall":
            return np.broadcast_to(self.velocity + self.gravity * t, p.shape).copy()
        _, off = self.pose(t)
        return self.velocity + np.cross(self.omega, p - (self.pivot + off))

    def extreme_points(self):
        if self.shape == "sphere":
            d = np.concatenate([np.eye(3), -np.eye(3)]) * self.radius
            return self.center + d
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
        return self.center + (signs * self.half_extents) @ self.orientation.T

    def to_json(self):
        d = asdict(self)
        return {k: (v.tolist() if isinstance(v, np.ndarray) else list(v) if isinstance(v, tuple) else v)
                for k, v in d.items()}


@dataclass
class AnalyticScene:
    bodies: list
    aabb: np.ndarray = field(default_factory=lambda: np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]]))

    def __post_init__(self):
        self.aabb = np.asarray(self.aabb, dtype=np.float64).reshape(2, 3)

    def check_bounds(self, n_times=101):
        for i, b in enumerate(self.bodies):
            rest = b.extreme_points()
            for t in np.linspace(0.0, 1.0, n_times):
                R, off = b.pose(t)
                world = (rest - b.pivot) @ R.T + b.pivot + off
                if np.any(world < self.aabb[0] - 1e-9) or np.any(world > self.aabb[1] + 1e-9):
                    raise SceneError(f"body {i} exits the AABB at t={t:.3f}")

    def body_density(self, p, t):
        """Per-body density, shape ``p.shape[:-1] + (n_bodies,)``."""
        out = np.zeros(p.shape[:-1] + (len(self.bodies),))
        for i, b in enumerate(self.bodies):
            out[..., i] = np.where(b.contains(p, t), b.sigma, 0.0)
        return out

    def velocity(self, p, t):
        return velocity_oracle(self, p, t)

    def to_json(self):
        return {"bodies": [b.to_json() for b in self.bodies], "aabb": self.aabb.tolist()}

    @classmethod
    def from_json(cls, d):
        bodies = [RigidBody(**b) for b in d.get("bodies", [])]
        aabb = d.get("aabb", [[-1.0] * 3, [1.0] * 3])
        if isinstance(aabb, dict):
            aabb = [aabb["min"], aabb["max"]]
        return cls(bodies, aabb)


def velocity_oracle(scene, p, t):
    """Closed-form velocity: body twist (or fall) inside a body, zero in free space."""
    p = np.asarray(p, dtype=np.float64)
    v = np.zeros_like(p)
    for b in scene.bodies:
        inside = b.contains(p, t)
        if np.any(inside):
            v[inside] = b.velocity_at(p[inside], t)
    return v


def sliding_box(speed=0.6, color=(0.9, 0.45, 0.2)):
    """One box translating along +x; the default extrapolation scene."""
    return AnalyticScene([RigidBody("box", (-0.35, 0.0, 0.0), sigma=60.0, color=color,
                                    half_extents=(0.3, 0.3, 0.3), velocity=(speed, 0.0, 0.0))])


def two_boxes(speed=0.5):
    """Two boxes translating in opposite directions; the decomposition scene."""
    return AnalyticScene([
        RigidBody("box", (-0.25, -0.45, 0.0), sigma=60.0, color=(0.9, 0.3, 0.2),
                  half_extents=(0.25, 0.25, 0.25), velocity=(speed, 0.0, 0.0)),
        RigidBody("box", (0.25, 0.45, 0.0), sigma=60.0, color=(0.2, 0.5, 0.9),
                  half_extents=(0.25, 0.25, 0.25), velocity=(-speed, 0.0, 0.0)),
    ])


PRESETS = {"sliding_box": sliding_box, "two_boxes": two_boxes}


# ----------------------------------------------------------------------------
# generation


def render_analytic(scene, camera, t, samples_per_ray, aabb=None):
    """Render one frame of the analytic field; returns (rgb, per-body weights, alpha)."""
    from .renderer import composite
    from .sampling import rays_for_camera, stratified_samples

    aabb = scene.aabb if aabb is None else aabb
    rays = rays_for_camera(camera, t, aabb)
    depths, deltas = stratified_samples(rays.near, rays.far, samples_per_ray)
    pts = rays.origins[:, None, :] + rays.dirs[:, None, :] * depths[..., None]
    dens = scene.body_density(pts, t)  # [R, S, B]
    total = dens.sum(-1)
    colors = np.array([b.color for b in scene.bodies], dtype=np.float64).reshape(-1, 3)
    share = np.divide(dens, total[..., None], out=np.zeros_like(dens), where=total[..., None] > 0)
    rgb_s = share @ colors if len(scene.bodies) else np.zeros(total.shape + (3,))
    rgb, alpha, weights = composite(rgb_s, total, deltas)
    body_w = (weights.data[..., None] * share).sum(axis=1)
    h, w = camera.height, camera.width
    return rgb.data.reshape(h, w, 3), body_w.reshape(h, w, -1), alpha.data.reshape(h, w)


def labels_from_weights(body_weights, alpha, threshold=0.5):
    """Argmax body (1-based); 0 where accumulated alpha is below ``threshold``."""
    if body_weights.shape[-1] == 0:
        return np.zeros(alpha.shape, dtype=np.uint8)
    labels = np.argmax(body_weights, axis=-1).astype(np.uint8) + 1
    labels[alpha < threshold] = 0
    return labels


@dataclass
class GeneratedScene:
    manifest: SceneManifest
    images: dict  # (cam, stamp index) -> HxWx3
    masks: dict  # (cam, stamp index) -> HxW labels
    scene: AnalyticScene

    def velocity(self, p, t):
        return velocity_oracle(self.scene, p, t)


def generate_scene(scene, cameras, n_stamps, samples_per_ray=256, train_fraction=0.75,
                   test_cameras=(), out_dir=None, near=0.1, far=6.0):
    """Render every (camera, stamp) frame of ``scene``.

    ``cameras`` supply training views; ``test_cameras`` are held out for the
    interpolation split.  Stamps are ``j / (n_stamps - 1)``; the first
    ``int(train_fraction * n_stamps)`` are in the training span and the rest
    form the extrapolation split for every camera.
    """
    scene.check_bounds()
    n_train = int(train_fraction * n_stamps)
    frames, images, masks = [], {}, {}
    all_cams = list(cameras) + list(test_cameras)
    test_ids = {c.id for c in test_cameras}
    times = stamp_times(n_stamps)
    for cam in all_cams:
        for j, t in enumerate(times):
            rgb, body_w, alpha = render_analytic(scene, cam, t, samples_per_ray)
            images[(cam.id, j)] = rgb
            masks[(cam.id, j)] = labels_from_weights(body_w, alpha)
            if j >= n_train:
                split = "test-extrap"
            else:
                split = "test-interp" if cam.id in test_ids else "train"
            frames.append(FrameRecord(cam.id, t, f"frames/cam{cam.id}_t{j:03d}.ppm", split,
                                      f"masks/cam{cam.id}_t{j:03d}.pgm"))
    manifest = SceneManifest(all_cams, frames, scene.aabb, near, far, n_stamps,
                             motion=scene.to_json(), root=None if out_dir is None else Path(out_dir))
    if out_dir is not None:
        out_dir = Path(out_dir)
        for fr in frames:
            j = manifest.stamp_index(fr.t)
            write_image(images[(fr.cam, j)], out_dir / fr.image)
            write_labels(masks[(fr.cam, j)], out_dir / fr.mask)
        save_manifest(manifest, out_dir / "manifest.json")
    return GeneratedScene(manifest, images, masks, scene)


def scene_from_manifest(manifest):
    if manifest.motion is None:
        raise ManifestError("manifest carries no ground-truth motion")
    return AnalyticScene.from_json(manifest.motion)


def load_frames(manifest, split=None):
    """Read images (and masks when present) for ``split`` keyed by (cam, stamp index)."""
    images, masks = {}, {}
    for fr in manifest.frames:
        if split is not None and fr.split != split:
            continue
        key = (fr.cam, manifest.stamp_index(fr.t))
        images[key] = read_image(manifest.path(fr.image))
        if fr.mask is not None and manifest.path(fr.mask).exists():
            masks[key] = read_labels(manifest.path(fr.mask))
    return images, masks
