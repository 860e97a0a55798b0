"""Synthetic multi-view datasets rendered from analytic scenes.

Dataset directory layout::

    cameras.json        [{"fx", "fy", "cx", "cy", "width", "height", "pose": [12 reals]}]
    images/000.ppm      binary P6, 8 bit
    masks/000.ppm       optional, binary P5 (single channel), 0 or 255
    meta.json           {"version", "scene", "seed", "generator", "has_masks", ...}

``pose`` is the camera-to-world matrix [R | t] flattened row-major; camera
axes follow the x-right, y-down, z-forward convention.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .field import Field, Ray, Scene, ray_sphere_clip, sphere_trace_batch

DATASET_VERSION = 1
GENERATOR = "neusdf.scenegen/1"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # camera-to-world, columns are the camera axes
    translation: np.ndarray  # camera centre in world coordinates

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise ValueError("rotation must be orthonormal")
        if not np.all(np.isfinite(t)):
            raise ValueError("camera centre must be finite")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @property
    def center(self) -> np.ndarray:
        return self.translation

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2]

    def to_dict(self) -> dict:
        pose = np.concatenate([self.rotation, self.translation[:, None]], axis=1)
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "pose": [float(v) for v in pose.ravel()]}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        keys = {"fx", "fy", "cx", "cy", "width", "height", "pose"}
        if set(d) != keys:
            raise DatasetError(f"camera record must have keys {sorted(keys)}")
        pose = np.asarray(d["pose"], dtype=np.float64)
        if pose.size != 12:
            raise DatasetError("pose must have 12 entries")
        pose = pose.reshape(3, 4)
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), pose[:, :3], pose[:, 3])

    def directions(self, px, py) -> np.ndarray:
        """World-space unit directions through continuous pixel coordinates."""
        px = np.asarray(px, dtype=np.float64)
        py = np.asarray(py, dtype=np.float64)
        cam = np.stack([(px - self.cx) / self.fx, (py - self.cy) / self.fy, np.ones_like(px)],
                       axis=-1)
        d = cam @ self.rotation.T
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def pixel_rays(self):
        """Origins and directions through every pixel centre, row-major."""
        ys, xs = np.mgrid[0:self.height, 0:self.width]
        d = self.directions(xs.ravel() + 0.5, ys.ravel() + 0.5)
        return np.broadcast_to(self.center, d.shape).copy(), d


def look_at_rotation(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    forward = np.asarray(target, dtype=np.float64) - np.asarray(eye, dtype=np.float64)
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-12:
        raise ValueError("view direction is parallel to the up vector")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return np.stack([right, down, forward], axis=1)


def default_intrinsics(width: int, height: int, fov_deg: float = 40.0) -> dict:
    f = 0.5 * width / math.tan(math.radians(fov_deg) / 2.0)
    return {"fx": f, "fy": f, "cx": width / 2.0, "cy": height / 2.0,
            "width": width, "height": height}


def camera_ring(n_views: int, radius: float, elevation_deg: float = 20.0,
                look_at=(0.0, 0.0, 0.0), intrinsics: dict | None = None,
                bounding_radius: float = 1.0, azimuth_offset_deg: float = 0.0) -> list[Camera]:
    """Cameras evenly spaced in azimuth on a ring, all aimed at ``look_at``."""
    if n_views < 2:
        raise ValueError("need at least two views")
    return _ring(n_views, radius, elevation_deg, look_at, intrinsics, bounding_radius,
                 azimuth_offset_deg)


def _ring(n_views, radius, elevation_deg, look_at, intrinsics, bounding_radius,
          azimuth_offset_deg) -> list[Camera]:
    if not radius > bounding_radius:
        raise ValueError("camera ring must lie outside the bounding sphere")
    intr = intrinsics or default_intrinsics(128, 128)
    el = math.radians(elevation_deg)
    target = np.asarray(look_at, dtype=np.float64)
    cams = []
    for k in range(n_views):
        az = math.radians(azimuth_offset_deg) + 2.0 * math.pi * k / n_views
        eye = target + radius * np.array([math.cos(el) * math.cos(az),
                                          math.cos(el) * math.sin(az), math.sin(el)])
        cams.append(Camera(intr["fx"], intr["fy"], intr["cx"], intr["cy"], int(intr["width"]),
                           int(intr["height"]), look_at_rotation(eye, target), eye))
    return cams


def multi_ring(n_views: int, radius: float, elevations, **kwargs) -> list[Camera]:
    """Split ``n_views`` over several elevation rings (earlier rings get the remainder)."""
    elevations = list(elevations)
    if n_views < 2:
        raise ValueError("need at least two views")
    counts = [n_views // len(elevations)] * len(elevations)
    for i in range(n_views - sum(counts)):
        counts[i] += 1
    cams = []
    opts = dict(look_at=(0.0, 0.0, 0.0), intrinsics=None, bounding_radius=1.0,
                azimuth_offset_deg=0.0)
    opts.update(kwargs)
    for el, n in zip(elevations, counts):
        if n:
            cams.extend(_ring(n, radius, el, **opts))
    return cams


def pixel_ray(camera: Camera, px: float, py: float) -> Ray:
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise ValueError(f"pixel ({px}, {py}) outside a {camera.width}x{camera.height} image")
    return Ray(camera.center, camera.directions(px, py))


# --------------------------------------------------------------------------
# ground truth
# --------------------------------------------------------------------------


def headlight_shade(albedo, normals, views) -> np.ndarray:
    """albedo * (0.5 + 0.5 max(0, n . -v))."""
    cos = np.maximum(0.0, -np.sum(normals * views, axis=-1))
    return np.asarray(albedo) * (0.5 + 0.5 * cos)[..., None]


class HeadlightModel:
    """Colour model of the ground truth: scene albedo under a headlight."""

    def __init__(self, scene: Scene):
        self.scene = scene

    def __call__(self, points, normals, views):
        n = normals / np.maximum(np.linalg.norm(normals, axis=-1, keepdims=True), 1e-12)
        return headlight_shade(self.scene.albedo(points), n, views)


def trace_image(field: Field, color_fn, camera: Camera):
    """Sphere-traced RGB image (float, HxWx3), mask (bool) and hit depth."""
    o, d = camera.pixel_rays()
    near, far, inside = ray_sphere_clip(o, d, field.bounding_radius)
    rgb = np.zeros((o.shape[0], 3))
    depth = np.zeros(o.shape[0])
    mask = np.zeros(o.shape[0], dtype=bool)
    idx = np.nonzero(inside)[0]
    if idx.size:
        t, hit = sphere_trace_batch(field, o[idx], d[idx], near[idx], far[idx])
        hid = idx[hit]
        pts = o[hid] + t[hit, None] * d[hid]
        normals = field.gradient(pts)
        rgb[hid] = color_fn(pts, normals, d[hid])
        depth[hid] = t[hit]
        mask[hid] = True
    shape = (camera.height, camera.width)
    return rgb.reshape(*shape, 3), mask.reshape(shape), depth.reshape(shape)


def quantize(rgb: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)


@dataclass
class Dataset:
    images: list[np.ndarray]  # uint8 HxWx3
    cameras: list[Camera]
    masks: list[np.ndarray] | None = None  # bool HxW
    scene_path: str | None = None
    seed: int = 0
    bounding_radius: float = 1.0

    def __post_init__(self):
        if len(self.images) != len(self.cameras):
            raise DatasetError("one camera per image required")
        shapes = {im.shape for im in self.images}
        if len(shapes) > 1:
            raise DatasetError("all images must share dimensions")
        for im, cam in zip(self.images, self.cameras):
            if im.shape[:2] != (cam.height, cam.width):
                raise DatasetError("image size does not match its camera")
        if self.masks is not None and len(self.masks) != len(self.images):
            raise DatasetError("masks must be given for all images or none")

    @property
    def has_masks(self) -> bool:
        return self.masks is not None

    def __len__(self):
        return len(self.images)


def render_ground_truth(scene: Scene, cameras: list[Camera], color_fn=None,
                        seed: int = 0, scene_path: str | None = None) -> Dataset:
    color_fn = color_fn or HeadlightModel(scene)
    images, masks = [], []
    for cam in cameras:
        rgb, mask, _ = trace_image(scene, color_fn, cam)
        images.append(quantize(rgb))
        masks.append(mask)
    return Dataset(images, list(cameras), masks, scene_path, seed, scene.bounding_radius)


# --------------------------------------------------------------------------
# IO
# --------------------------------------------------------------------------


def write_ppm(path, image: np.ndarray) -> None:
    """P6 for HxWx3 uint8 arrays, P5 for HxW."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise ValueError("PPM writer expects uint8 data")
    if img.ndim == 3 and img.shape[2] == 3:
        header = f"P6\n{img.shape[1]} {img.shape[0]}\n255\n"
    elif img.ndim == 2:
        header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n"
    else:
        raise ValueError("image must be HxW or HxWx3")
    Path(path).write_bytes(header.encode("ascii") + np.ascontiguousarray(img).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255 or magic not in ("P5", "P6"):
        raise DatasetError(f"{path}: unsupported PPM ({magic}, maxval {maxval})")
    channels = 3 if magic == "P6" else 1
    n = w * h * channels
    body = data[pos:pos + n]
    if len(body) != n:
        raise DatasetError(f"{path}: truncated image data")
    arr = np.frombuffer(body, dtype=np.uint8).copy()
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def save_dataset(dataset: Dataset, path, extra_meta: dict | None = None) -> None:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for i, im in enumerate(dataset.images):
        write_ppm(root / "images" / f"{i:03d}.ppm", im)
    if dataset.masks is not None:
        (root / "masks").mkdir(exist_ok=True)
        for i, m in enumerate(dataset.masks):
            write_ppm(root / "masks" / f"{i:03d}.ppm", (np.asarray(m) * 255).astype(np.uint8))
    cams = [c.to_dict() for c in dataset.cameras]
    (root / "cameras.json").write_text(json.dumps(cams, indent=1) + "\n")
    meta = {"version": DATASET_VERSION, "generator": GENERATOR, "scene": dataset.scene_path,
            "seed": dataset.seed, "has_masks": dataset.has_masks,
            "bounding_radius": dataset.bounding_radius, "views": len(dataset)}
    if extra_meta:
        meta.update(extra_meta)
    (root / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def load_dataset(path) -> Dataset:
    root = Path(path)
    try:
        meta = json.loads((root / "meta.json").read_text())
        cams_raw = json.loads((root / "cameras.json").read_text())
    except FileNotFoundError as e:
        raise DatasetError(f"{root}: missing {Path(e.filename).name}") from e
    except json.JSONDecodeError as e:
        raise DatasetError(f"{root}: corrupt JSON ({e})") from e
    if meta.get("version") != DATASET_VERSION:
        raise DatasetError(f"{root}: unsupported dataset version {meta.get('version')}")
    cameras = [Camera.from_dict(c) for c in cams_raw]
    images, masks = [], [] if meta.get("has_masks") else None
    for i in range(len(cameras)):
        f = root / "images" / f"{i:03d}.ppm"
        if not f.exists():
            raise DatasetError(f"{root}: missing image {f.name}")
        im = read_ppm(f)
        if im.ndim != 3:
            raise DatasetError(f"{f}: expected an RGB image")
        images.append(im)
        if masks is not None:
            mf = root / "masks" / f"{i:03d}.ppm"
            if not mf.exists():
                raise DatasetError(f"{root}: masks declared but {mf.name} is missing")
            m = read_ppm(mf)
            if m.ndim == 3:
                m = m[..., 0]
            masks.append(m > 127)
    return Dataset(images, cameras, masks, meta.get("scene"), int(meta.get("seed", 0)),
                   float(meta.get("bounding_radius", 1.0)))
