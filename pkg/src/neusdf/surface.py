"""Zero level set extraction and Chamfer evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .field import Field

DEGENERATE_AREA = 1e-12
EVAL_CHUNK = 1 << 16


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray  # (n, 3) float64
    triangles: np.ndarray  # (k, 3) int64

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=-1)

    def boundary_edges(self) -> int:
        """Count of edges used by exactly one triangle (0 for a closed mesh)."""
        if self.is_empty:
            return 0
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]],
                            self.triangles[:, [2, 0]]])
        e.sort(axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return int(np.count_nonzero(counts == 1))


@dataclass(frozen=True)
class PointSample:
    points: np.ndarray

    def __len__(self):
        return len(self.points)


def empty_mesh() -> TriangleMesh:
    return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


def weld(mesh: TriangleMesh, tol: float = 1e-9) -> TriangleMesh:
    """Merge vertices that coincide to within ``tol`` (grid samples exactly on
    the level set produce such duplicates)."""
    if len(mesh.vertices) == 0:
        return mesh
    key = np.round(mesh.vertices / tol).astype(np.int64)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    return TriangleMesh(mesh.vertices[first], inverse.reshape(-1)[mesh.triangles])


def drop_degenerate(mesh: TriangleMesh, min_area: float = DEGENERATE_AREA) -> TriangleMesh:
    """Remove triangles with area <= ``min_area`` and vertices left unused."""
    keep = mesh.areas() > min_area
    tris = mesh.triangles[keep]
    used, inverse = np.unique(tris, return_inverse=True)
    return TriangleMesh(mesh.vertices[used], inverse.reshape(-1, 3))


def sample_grid(field: Field, resolution: int, bounds) -> tuple[np.ndarray, np.ndarray, float]:
    """SDF values on a regular grid of ``resolution + 1`` samples per axis."""
    lo, hi = float(bounds[0]), float(bounds[1])
    axis = np.linspace(lo, hi, resolution + 1)
    pts = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    vals = np.empty(len(pts))
    for i in range(0, len(pts), EVAL_CHUNK):
        vals[i:i + EVAL_CHUNK] = field.sdf(pts[i:i + EVAL_CHUNK])
    return vals.reshape((resolution + 1,) * 3), axis, (hi - lo) / resolution


def marching_cubes(field: Field, resolution: int, bounds=None) -> TriangleMesh:
    """Triangulate the zero level set of ``field`` over a cube.

    ``bounds`` is ``(lo, hi)`` applied to every axis and must contain the
    bounding sphere; it defaults to the sphere's enclosing cube.
    """
    if resolution < 8:
        raise ValueError("resolution must be at least 8")
    r = field.bounding_radius
    bounds = (-r, r) if bounds is None else (float(bounds[0]), float(bounds[1]))
    if bounds[0] > -r or bounds[1] < r:
        raise ValueError("bounds must enclose the bounding sphere")
    vol, _, h = sample_grid(field, resolution, bounds)
    if not (vol.min() < 0.0 < vol.max()):
        return empty_mesh()
    verts, faces, _, _ = measure.marching_cubes(vol, level=0.0, spacing=(h, h, h),
                                                method="lorensen")
    return drop_degenerate(weld(TriangleMesh(verts + bounds[0], faces), 1e-9 * h))


def sample_surface(mesh: TriangleMesh, count: int, rng: np.random.Generator) -> PointSample:
    """Area-weighted triangle choice followed by uniform barycentric sampling."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    areas = mesh.areas()
    tri = rng.choice(len(areas), size=count, p=areas / areas.sum())
    u = rng.uniform(size=(count, 2))
    flip = u.sum(axis=1) > 1.0
    u[flip] = 1.0 - u[flip]
    a, b, c = (mesh.vertices[mesh.triangles[tri, i]] for i in range(3))
    return PointSample(a + u[:, :1] * (b - a) + u[:, 1:] * (c - a))


def _points(x) -> np.ndarray:
    p = x.points if isinstance(x, PointSample) else np.asarray(x, dtype=np.float64)
    if len(p) == 0:
        raise ValueError("point sets must be non-empty")
    return p


@dataclass(frozen=True)
class ChamferReport:
    a_to_b: float
    b_to_a: float

    @property
    def symmetric(self) -> float:
        return 0.5 * (self.a_to_b + self.b_to_a)


def chamfer_report(a, b, squared: bool = False) -> ChamferReport:
    pa, pb = _points(a), _points(b)
    da, _ = cKDTree(pb).query(pa)
    db, _ = cKDTree(pa).query(pb)
    if squared:
        da, db = da * da, db * db
    return ChamferReport(float(da.mean()), float(db.mean()))


def chamfer(a, b, squared: bool = False) -> float:
    """Average of the two directed mean nearest-neighbour distances."""
    return chamfer_report(a, b, squared).symmetric


# --------------------------------------------------------------------------
# ray queries
# --------------------------------------------------------------------------


def ray_mesh_hits(mesh: TriangleMesh, origin, direction, eps: float = 1e-12) -> np.ndarray:
    """Sorted ray parameters ``t >= 0`` of every triangle hit (Moller-Trumbore)."""
    if mesh.is_empty:
        return np.zeros(0)
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    a, b, c = (mesh.vertices[mesh.triangles[:, i]] for i in range(3))
    e1, e2 = b - a, c - a
    p = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, p)
    ok = np.abs(det) > eps
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = o - a
    u = np.einsum("ij,ij->i", s, p) * inv
    q = np.cross(s, e1)
    v = (q @ d) * inv
    t = np.einsum("ij,ij->i", e2, q) * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t >= 0)
    return np.sort(t[hit])


# --------------------------------------------------------------------------
# IO
# --------------------------------------------------------------------------


def write_obj(path, mesh: TriangleMesh) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {i + 1} {j + 1} {k + 1}" for i, j, k in mesh.triangles.tolist()]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            faces.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1))
        elif parts[0] not in ("vn", "vt", "o", "g", "s", "usemtl", "mtllib"):
            raise ValueError(f"{path}:{n}: unsupported OBJ record {parts[0]!r}")
    return TriangleMesh(np.asarray(verts, dtype=np.float64).reshape(-1, 3),
                        np.asarray(faces, dtype=np.int64).reshape(-1, 3))


def write_xyz(path, sample: PointSample) -> None:
    np.savetxt(path, _points(sample), fmt="%.17g")


def read_xyz(path) -> PointSample:
    return PointSample(np.loadtxt(path, dtype=np.float64, ndmin=2))
