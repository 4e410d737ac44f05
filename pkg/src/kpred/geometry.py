"""Point-cloud and mesh primitives.

Everything here works on plain float64 numpy arrays: a point cloud is an
``(N, 3)`` array, a mesh is a :class:`TriMesh`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise GeometryError("face index out of range")

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def is_watertight(self) -> bool:
        """True when every undirected edge is shared by exactly two faces."""
        if len(self.faces) == 0:
            return False
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e.sort(axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def check(self):
        if not np.all(np.isfinite(self.vertices)):
            raise GeometryError("non-finite vertex")
        if np.any(self.face_areas() <= 1e-12):
            raise GeometryError("degenerate triangle")


@dataclass
class NormalizeTransform:
    """``normalized = (points - center) * scale``."""

    center: np.ndarray
    scale: float

    def apply(self, points):
        return (np.asarray(points, dtype=np.float64) - self.center) * self.scale

    def inverse(self, points):
        return np.asarray(points, dtype=np.float64) / self.scale + self.center


@dataclass
class RegionAssignment:
    indices: list
    counts: np.ndarray
    densities: np.ndarray
    radius: float = 0.3
    n_ref: float = 1.0
    meta: dict = field(default_factory=dict)


def as_points(pc) -> np.ndarray:
    pts = np.asarray(pc, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise GeometryError(f"expected (N, 3) points, got shape {pts.shape}")
    if len(pts) == 0:
        raise GeometryError("empty point cloud")
    if not np.all(np.isfinite(pts)):
        raise GeometryError("non-finite coordinates")
    return pts


def normalize_unit_cube(pc):
    """Center the bounding box at the origin and scale the longest extent to 1."""
    pts = as_points(pc)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    extent = float((hi - lo).max())
    if extent <= 0.0:
        raise GeometryError("zero extent")
    tf = NormalizeTransform(center=(lo + hi) / 2.0, scale=1.0 / extent)
    out = tf.apply(pts)
    return out, tf


def sample_mesh_surface(mesh: TriMesh, n: int, seed=0) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface."""
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0.0:
        raise GeometryError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    face = rng.choice(len(areas), size=n, p=areas / total)
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    tri = mesh.vertices[mesh.faces[face]]
    return tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])


def pairwise_sqdist(a, b) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def farthest_point_sampling(pc, k: int, seed=None, random_start=False) -> np.ndarray:
    """Greedy farthest point sampling.

    Starts from the lexicographically smallest point unless ``random_start``
    is set; ties go to the lowest index.
    """
    pts = as_points(pc)
    n = len(pts)
    if k > n:
        raise GeometryError(f"cannot sample {k} points from {n}")
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    if random_start:
        start = int(np.random.default_rng(seed).integers(n))
    else:
        start = int(np.lexsort(pts.T[::-1])[0])
    picked = np.empty(k, dtype=np.int64)
    picked[0] = start
    mind = np.sum((pts - pts[start]) ** 2, axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(mind))
        picked[i] = nxt
        mind = np.minimum(mind, np.sum((pts - pts[nxt]) ** 2, axis=1))
    return picked


def _nearest_sq(a, b, chunk=1024):
    out = np.empty(len(a))
    for s in range(0, len(a), chunk):
        out[s:s + chunk] = pairwise_sqdist(a[s:s + chunk], b).min(axis=1)
    return out


def unilateral_chamfer(src, dst) -> float:
    """Mean squared distance from each point of ``src`` to its nearest in ``dst``."""
    a, b = as_points(src), as_points(dst)
    return float(np.mean(_nearest_sq(a, b)))


def chamfer_distance(a, b) -> float:
    return unilateral_chamfer(a, b) + unilateral_chamfer(b, a)


def random_slice(pc, gamma: float, seed=0) -> np.ndarray:
    """Drop the ``ceil(gamma * N)`` points lying furthest along a random direction."""
    pts = as_points(pc)
    if not 0.0 <= gamma < 1.0:
        raise GeometryError(f"occlusion ratio must be in [0, 1), got {gamma}")
    n_drop = math.ceil(gamma * len(pts))
    if n_drop >= len(pts):
        raise GeometryError("slice would remove every point")
    if n_drop == 0:
        return pts.copy()
    rng = np.random.default_rng(seed)
    normal = rng.normal(size=3)
    normal /= np.linalg.norm(normal)
    order = np.argsort(pts @ normal, kind="stable")
    keep = np.sort(order[: len(pts) - n_drop])
    return pts[keep]


def region_density(count, n_ref: float):
    if n_ref <= 0:
        raise GeometryError("n_ref must be positive")
    return np.minimum(np.asarray(count, dtype=np.float64) / n_ref, 1.0)


def default_n_ref(n_points: int, n_keypoints: int) -> float:
    return 0.5 * n_points / n_keypoints


def region_query(pc, centers, r: float, n_ref: float | None = None) -> RegionAssignment:
    """Indices of points within ``r`` of each center, plus clipped densities."""
    pts = as_points(pc)
    ctr = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    if r <= 0:
        raise GeometryError("radius must be positive")
    if n_ref is None:
        n_ref = default_n_ref(len(pts), len(ctr))
    inside = pairwise_sqdist(ctr, pts) <= r * r
    indices = [np.flatnonzero(row) for row in inside]
    counts = inside.sum(axis=1)
    return RegionAssignment(indices, counts, region_density(counts, n_ref), r, n_ref)
