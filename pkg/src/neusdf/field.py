"""Analytic signed-distance fields, CSG composition and ray queries.

Every field evaluates on point arrays of shape ``(..., 3)`` and returns
values of shape ``(...)``.  Fields are positive outside, negative inside.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Any, Protocol

import numpy as np

FD_STEP_SCALE = 1e-4
TRACE_TOL = 1e-5
TRACE_MAX_ITERS = 256


class SceneError(ValueError):
    """Raised for malformed scene descriptions."""


class Field(Protocol):
    bounding_radius: float

    def sdf(self, points: np.ndarray) -> np.ndarray: ...

    def gradient(self, points: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(o)) and np.all(np.isfinite(d))):
            raise ValueError("ray origin and direction must be finite")
        n = np.linalg.norm(d)
        if n == 0:
            raise ValueError("ray direction must be non-zero")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d / n)

    def at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction


@dataclass(frozen=True)
class SurfaceHit:
    hit: bool
    t: float = float("nan")
    point: np.ndarray | None = None
    normal: np.ndarray | None = None


def _norm(v: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(v * v, axis=-1))


def _safe_unit(v: np.ndarray) -> np.ndarray:
    n = _norm(v)[..., None]
    return v / np.where(n > 0, n, 1.0)


def _as_points(points) -> np.ndarray:
    return np.asarray(points, dtype=np.float64)


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------


class Node:
    """Base class of the CSG tree."""

    def sdf(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def leaves(self) -> list["Primitive"]:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class Primitive(Node):
    albedo: tuple = dc_field(default=(0.8, 0.8, 0.8), kw_only=True)

    def leaves(self):
        return [self]


@dataclass(frozen=True, eq=False)
class Sphere(Primitive):
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0

    def sdf(self, points):
        return _norm(_as_points(points) - np.asarray(self.center)) - self.radius

    def gradient(self, points):
        return _safe_unit(_as_points(points) - np.asarray(self.center))

    def to_dict(self):
        return {"type": "sphere", "center": list(self.center), "radius": self.radius,
                "albedo": list(self.albedo)}


@dataclass(frozen=True, eq=False)
class Plane(Primitive):
    """Half-space ``normal . x - offset <= 0`` (inside is below the plane)."""

    normal: tuple = (0.0, 0.0, 1.0)
    offset: float = 0.0

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        norm = np.linalg.norm(n)
        if norm == 0:
            raise SceneError("plane normal must be non-zero")
        object.__setattr__(self, "normal", tuple((n / norm).tolist()))

    def sdf(self, points):
        return _as_points(points) @ np.asarray(self.normal) - self.offset

    def gradient(self, points):
        p = _as_points(points)
        return np.broadcast_to(np.asarray(self.normal), p.shape).copy()

    def to_dict(self):
        return {"type": "plane", "normal": list(self.normal), "offset": self.offset,
                "albedo": list(self.albedo)}


@dataclass(frozen=True, eq=False)
class Box(Primitive):
    center: tuple = (0.0, 0.0, 0.0)
    half_extents: tuple = (0.5, 0.5, 0.5)

    def sdf(self, points):
        q = np.abs(_as_points(points) - np.asarray(self.center)) - np.asarray(self.half_extents)
        outside = _norm(np.maximum(q, 0.0))
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    def gradient(self, points):
        d = _as_points(points) - np.asarray(self.center)
        sgn = np.where(d >= 0, 1.0, -1.0)
        q = np.abs(d) - np.asarray(self.half_extents)
        qmax = np.max(q, axis=-1)
        out = _safe_unit(np.maximum(q, 0.0)) * sgn
        axis = np.argmax(q, axis=-1)
        inside = np.zeros_like(d)
        np.put_along_axis(inside, axis[..., None], 1.0, axis=-1)
        inside *= sgn
        return np.where((qmax > 0)[..., None], out, inside)

    def to_dict(self):
        return {"type": "box", "center": list(self.center),
                "half_extents": list(self.half_extents), "albedo": list(self.albedo)}


@dataclass(frozen=True, eq=False)
class Torus(Primitive):
    """Torus around the z axis; ``radii = (major, minor)``."""

    center: tuple = (0.0, 0.0, 0.0)
    radii: tuple = (0.6, 0.2)

    def _q(self, points):
        d = _as_points(points) - np.asarray(self.center)
        rho = np.sqrt(d[..., 0] ** 2 + d[..., 1] ** 2)
        return d, rho, np.stack([rho - self.radii[0], d[..., 2]], axis=-1)

    def sdf(self, points):
        _, _, q = self._q(points)
        return _norm(q) - self.radii[1]

    def gradient(self, points):
        d, rho, q = self._q(points)
        qn = _safe_unit(q)
        radial = d[..., :2] / np.where(rho > 0, rho, 1.0)[..., None]
        return np.concatenate([qn[..., :1] * radial, qn[..., 1:]], axis=-1)

    def to_dict(self):
        return {"type": "torus", "center": list(self.center), "radii": list(self.radii),
                "albedo": list(self.albedo)}


# --------------------------------------------------------------------------
# CSG operators
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _Binary(Node):
    a: Node
    b: Node
    op_name = ""
    # finite-difference step used near seams, set from the owning scene
    fd_step: float = FD_STEP_SCALE

    def _pair(self, points):
        fa = self.a.sdf(points)
        fb = self.b.sdf(points)
        return fa, fb

    def _select_a(self, fa, fb) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, points):
        p = _as_points(points)
        fa, fb = self._pair(p)
        take_a = self._select_a(fa, fb)
        ga = self.a.gradient(p)
        gb = self.b.gradient(p)
        if isinstance(self, Difference):
            gb = -gb
        g = np.where(take_a[..., None], ga, gb)
        seam = np.abs(self._branch_gap(fa, fb)) < 2.0 * self.fd_step
        if np.any(seam):
            g[seam] = central_difference(self, p[seam], self.fd_step)
        return g

    def _branch_gap(self, fa, fb):
        return fa - fb

    def leaves(self):
        return self.a.leaves() + self.b.leaves()

    def to_dict(self):
        return {"op": self.op_name, "children": [self.a.to_dict(), self.b.to_dict()]}


@dataclass(frozen=True, eq=False)
class Union(_Binary):
    op_name = "union"

    def sdf(self, points):
        fa, fb = self._pair(points)
        return np.minimum(fa, fb)

    def _select_a(self, fa, fb):
        return fa <= fb


@dataclass(frozen=True, eq=False)
class Intersection(_Binary):
    op_name = "intersection"

    def sdf(self, points):
        fa, fb = self._pair(points)
        return np.maximum(fa, fb)

    def _select_a(self, fa, fb):
        return fa >= fb


@dataclass(frozen=True, eq=False)
class Difference(_Binary):
    """``a`` with ``b`` carved out: ``max(f_a, -f_b)``."""

    op_name = "difference"

    def sdf(self, points):
        fa, fb = self._pair(points)
        return np.maximum(fa, -fb)

    def _select_a(self, fa, fb):
        return fa >= -fb

    def _branch_gap(self, fa, fb):
        return fa + fb


_PRIMITIVES = {
    "sphere": (Sphere, {"center", "radius"}),
    "plane": (Plane, {"normal", "offset"}),
    "box": (Box, {"center", "half_extents"}),
    "torus": (Torus, {"center", "radii"}),
}
_OPS = {"union": Union, "intersection": Intersection, "difference": Difference}


def central_difference(f: Node | "Scene", points: np.ndarray, h: float) -> np.ndarray:
    """Central-difference gradient of ``f.sdf`` at ``points`` with step ``h``."""
    p = _as_points(points)
    out = np.empty(p.shape, dtype=np.float64)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        out[..., k] = (f.sdf(p + e) - f.sdf(p - e)) / (2.0 * h)
    return out


def node_from_dict(d: dict, fd_step: float = FD_STEP_SCALE) -> Node:
    if not isinstance(d, dict):
        raise SceneError(f"scene node must be an object, got {type(d).__name__}")
    if "op" in d:
        extra = set(d) - {"op", "children"}
        if extra:
            raise SceneError(f"unknown keys in op node: {sorted(extra)}")
        op = d["op"]
        if op not in _OPS:
            raise SceneError(f"unknown CSG op {op!r}")
        children = d.get("children")
        if not isinstance(children, list) or len(children) < 2:
            raise SceneError(f"{op} needs at least two children")
        nodes = [node_from_dict(c, fd_step) for c in children]
        if op == "difference" and len(nodes) != 2:
            raise SceneError("difference takes exactly two children")
        acc = nodes[0]
        for nxt in nodes[1:]:
            acc = _OPS[op](acc, nxt, fd_step=fd_step)
        return acc
    kind = d.get("type")
    if kind not in _PRIMITIVES:
        raise SceneError(f"unknown primitive type {kind!r}")
    cls, fields = _PRIMITIVES[kind]
    extra = set(d) - fields - {"type", "albedo"}
    if extra:
        raise SceneError(f"unknown keys for {kind}: {sorted(extra)}")
    missing = fields - set(d)
    if missing:
        raise SceneError(f"missing keys for {kind}: {sorted(missing)}")
    kwargs: dict[str, Any] = {}
    for k in fields:
        v = d[k]
        kwargs[k] = tuple(float(x) for x in v) if isinstance(v, list) else float(v)
    if "albedo" in d:
        albedo = tuple(float(x) for x in d["albedo"])
        if len(albedo) != 3 or not all(0.0 <= a <= 1.0 for a in albedo):
            raise SceneError("albedo must be three values in [0, 1]")
        kwargs["albedo"] = albedo
    return cls(**kwargs)


# --------------------------------------------------------------------------
# scene
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Scene:
    """An immutable CSG scene with a bounding sphere centred at the origin."""

    root: Node
    bounding_radius: float = 1.0
    _leaves: list = dc_field(init=False, repr=False)

    def __post_init__(self):
        if not self.bounding_radius > 0:
            raise SceneError("bounding_radius must be positive")
        object.__setattr__(self, "_leaves", self.root.leaves())

    @property
    def fd_step(self) -> float:
        return FD_STEP_SCALE * self.bounding_radius

    def sdf(self, points) -> np.ndarray:
        return self.root.sdf(_as_points(points))

    def gradient(self, points) -> np.ndarray:
        return self.root.gradient(_as_points(points))

    def albedo(self, points) -> np.ndarray:
        """Albedo of the leaf whose surface is closest to each point."""
        p = _as_points(points)
        dists = np.stack([np.abs(leaf.sdf(p)) for leaf in self._leaves], axis=-1)
        colors = np.asarray([leaf.albedo for leaf in self._leaves], dtype=np.float64)
        return colors[np.argmin(dists, axis=-1)]

    def to_dict(self) -> dict:
        return {"bounding_radius": self.bounding_radius, "primitives": self.root.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        extra = set(d) - {"bounding_radius", "primitives"}
        if extra:
            raise SceneError(f"unknown top-level keys: {sorted(extra)}")
        if "primitives" not in d:
            raise SceneError("scene needs a 'primitives' tree")
        radius = float(d.get("bounding_radius", 1.0))
        if not radius > 0:
            raise SceneError("bounding_radius must be positive")
        root = node_from_dict(d["primitives"], fd_step=FD_STEP_SCALE * radius)
        return cls(root, radius)

    @classmethod
    def load(cls, path) -> "Scene":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise SceneError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def eval_sdf(field: Field, x) -> np.ndarray | float:
    out = field.sdf(_as_points(x))
    return float(out) if np.ndim(out) == 0 else out


def eval_grad(field: Field, x) -> np.ndarray:
    return field.gradient(_as_points(x))


# --------------------------------------------------------------------------
# ray queries
# --------------------------------------------------------------------------


def ray_sphere_clip(origins, directions, radius: float):
    """Entry/exit parameters against a sphere at the origin.

    Works on single rays or batches.  Returns ``(t_near, t_far, hit)``;
    ``t_near`` is clamped to zero for origins inside the sphere.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    o = _as_points(origins)
    d = _as_points(directions)
    b = np.sum(o * d, axis=-1)
    c = np.sum(o * o, axis=-1) - radius * radius
    disc = b * b - c
    hit = disc > 0
    root = np.sqrt(np.where(hit, disc, 0.0))
    t_far = -b + root
    hit = hit & (t_far > 0)
    t_near = np.maximum(-b - root, 0.0)
    return t_near, t_far, hit


def clip_ray(ray: Ray, radius: float) -> tuple[float, float] | None:
    """Scalar convenience wrapper; ``None`` when the ray misses."""
    tn, tf, hit = ray_sphere_clip(ray.origin, ray.direction, radius)
    if not bool(hit):
        return None
    return float(tn), float(tf)


def sphere_trace_batch(field: Field, origins, directions, t_min, t_max,
                       tol: float = TRACE_TOL, max_iters: int = TRACE_MAX_ITERS,
                       step_scale: float = 1.0):
    """Vectorized sphere tracing.  Returns ``(t, hit)`` arrays.

    Rays step by ``|f|`` so traces starting inside a solid find the exit
    surface.  Rays still unconverged after ``max_iters`` report no hit.
    """
    o = _as_points(origins).reshape(-1, 3)
    d = _as_points(directions).reshape(-1, 3)
    n = o.shape[0]
    t = np.broadcast_to(np.asarray(t_min, dtype=np.float64), (n,)).copy()
    tmax = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (n,))
    hit = np.zeros(n, dtype=bool)
    active = t < tmax
    for _ in range(max_iters):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        f = field.sdf(o[idx] + t[idx, None] * d[idx])
        done = np.abs(f) < tol
        hit[idx[done]] = True
        step = idx[~done]
        t[step] += step_scale * np.abs(f[~done])
        active[idx[done]] = False
        escaped = step[t[step] > tmax[step]]
        active[escaped] = False
    return t, hit


def sphere_trace(field: Field, ray: Ray, t_min: float, t_max: float) -> SurfaceHit:
    if not t_min < t_max:
        raise ValueError("t_min must be smaller than t_max")
    t, hit = sphere_trace_batch(field, ray.origin[None], ray.direction[None], t_min, t_max)
    if not hit[0]:
        return SurfaceHit(hit=False)
    p = ray.at(t[0])
    return SurfaceHit(hit=True, t=float(t[0]), point=p, normal=_safe_unit(field.gradient(p)))
