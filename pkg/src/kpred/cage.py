"""Enclosing cages, 3D mean value coordinates and keypoint-driven cage motion."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import GeometryError, TriMesh, as_points

SNAP_EPS = 1e-8
ENCLOSE_EPS = 1e-6


@dataclass
class Cage:
    mesh: TriMesh
    shape_id: str = ""

    @property
    def vertices(self):
        return self.mesh.vertices

    @property
    def faces(self):
        return self.mesh.faces

    @property
    def n_vertices(self):
        return len(self.mesh.vertices)


def _icosphere(subdivisions: int):
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(verts), np.array(faces, dtype=np.int64)


def _box2():
    # 3x3x3 grid on the cube surface: 8 corners, 12 edge midpoints, 6 face centers
    grid = [(x, y, z) for x in (-1, 0, 1) for y in (-1, 0, 1) for z in (-1, 0, 1)
            if max(abs(x), abs(y), abs(z)) == 1]
    index = {g: i for i, g in enumerate(grid)}
    faces = []
    for axis in range(3):
        for side in (-1, 1):
            u, v = [a for a in range(3) if a != axis]
            for i in (-1, 0):
                for j in (-1, 0):
                    quad = []
                    for di, dj in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = [0, 0, 0]
                        p[axis], p[u], p[v] = side, i + di, j + dj
                        quad.append(index[tuple(p)])
                    faces += [(quad[0], quad[1], quad[2]), (quad[0], quad[2], quad[3])]
    verts = np.array(grid, dtype=np.float64)
    return verts, orient_outward(verts, np.array(faces, dtype=np.int64))


def orient_outward(verts, faces, center=None):
    """Flip faces whose normal points towards ``center`` (convex meshes only)."""
    if center is None:
        center = verts.mean(axis=0)
    faces = faces.copy()
    v = verts[faces]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    flip = np.einsum("ij,ij->i", n, v[:, 0] - center) < 0
    faces[flip] = faces[flip][:, ::-1]
    return faces


def cage_template(name: str = "icosphere1"):
    if name == "icosphere0":
        v, f = _icosphere(0)
    elif name == "icosphere1":
        v, f = _icosphere(1)
    elif name == "box2":
        return _box2()
    else:
        raise ValueError(f"unknown cage template {name!r}")
    return v, orient_outward(v, f, np.zeros(3))


def face_planes(verts, faces):
    """Unit outward normals and offsets so that ``n . x - d`` is the signed distance."""
    v = verts[faces]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    return n, np.einsum("ij,ij->i", n, v[:, 0])


def signed_face_distances(points, verts, faces):
    n, d = face_planes(verts, faces)
    return points @ n.T - d


def encloses(points, verts, faces, eps=ENCLOSE_EPS) -> bool:
    return bool(np.all(signed_face_distances(points, verts, faces) < -eps))


def is_convex(verts, faces, tol=1e-9) -> bool:
    return bool(np.all(signed_face_distances(verts, verts, faces) <= tol))


def build_cage(pc, template="icosphere1", margin=1.2, shape_id="", max_steps=20) -> Cage:
    """Scale a convex template around the bounding box until it encloses ``pc``."""
    pts = as_points(pc)
    tv, tf = cage_template(template)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center = (lo + hi) / 2.0
    half = np.maximum((hi - lo) / 2.0, 1e-3 * max(float((hi - lo).max()), 1e-9))
    scale = margin
    for _ in range(max_steps + 1):
        verts = center + tv * (scale * half)
        if encloses(pts, verts, tf):
            mesh = TriMesh(verts, tf)
            return Cage(mesh, shape_id)
        scale *= 1.05
    raise GeometryError(f"cage does not enclose the shape after {max_steps} inflation steps")


def mvc_matrix(points, cage) -> np.ndarray:
    """Mean value coordinates of every point with respect to a closed triangle cage.

    Rows sum to one and reproduce the query point; points snapping onto a
    cage vertex get an indicator row, points on a face get that face's
    barycentric coordinates.
    """
    verts = cage.vertices if isinstance(cage, Cage) else np.asarray(cage[0], dtype=np.float64)
    faces = cage.faces if isinstance(cage, Cage) else np.asarray(cage[1], dtype=np.int64)
    x = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n_pts, n_c = len(x), len(verts)
    weights = np.zeros((n_pts, n_c))
    done = np.zeros(n_pts, dtype=bool)

    diff = verts[None, :, :] - x[:, None, :]              # (P, C, 3)
    dist = np.linalg.norm(diff, axis=2)                   # (P, C)

    near_v = dist.min(axis=1) < SNAP_EPS
    if near_v.any():
        rows = np.flatnonzero(near_v)
        weights[rows, dist[rows].argmin(axis=1)] = 1.0
        done |= near_v

    # points lying on a face: barycentric fallback
    n, d = face_planes(verts, faces)
    sd = x @ n.T - d
    on_plane = np.abs(sd) < SNAP_EPS
    if on_plane.any():
        for p, f in zip(*np.nonzero(on_plane & ~done[:, None])):
            if done[p]:
                continue
            bary = _barycentric(x[p], verts[faces[f]])
            if bary is not None:
                weights[p, faces[f]] = bary
                done[p] = True

    todo = np.flatnonzero(~done)
    for s in range(0, len(todo), 2048):
        rows = todo[s:s + 2048]
        weights[rows] = _mvc_interior(x[rows], diff[rows], dist[rows], faces, n_c)
    return weights


def _barycentric(p, tri, tol=1e-9):
    a, b, c = tri
    v0, v1, v2 = b - a, c - a, p - a
    d00, d01, d11 = v0 @ v0, v0 @ v1, v1 @ v1
    d20, d21 = v2 @ v0, v2 @ v1
    den = d00 * d11 - d01 * d01
    v = (d11 * d20 - d01 * d21) / den
    w = (d00 * d21 - d01 * d20) / den
    bary = np.array([1.0 - v - w, v, w])
    if np.all(bary >= -tol):
        return bary
    return None


def _mvc_interior(x, diff, dist, faces, n_c, eps=1e-12):
    u = diff / dist[:, :, None]                            # unit vectors (P, C, 3)
    uf = u[:, faces]                                       # (P, F, 3, 3)
    df = dist[:, faces]                                    # (P, F, 3)
    # edge lengths opposite each corner: l_i = |u_{i+1} - u_{i-1}|
    l = np.linalg.norm(np.roll(uf, -1, axis=2) - np.roll(uf, 1, axis=2), axis=3)
    theta = 2.0 * np.arcsin(np.clip(l / 2.0, -1.0, 1.0))
    h = theta.sum(axis=2) / 2.0
    sin_t = np.sin(theta)
    sin_t_next, sin_t_prev = np.roll(sin_t, -1, axis=2), np.roll(sin_t, 1, axis=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        c = 2.0 * np.sin(h)[..., None] * np.sin(h[..., None] - theta) / (sin_t_next * sin_t_prev) - 1.0
    c = np.clip(c, -1.0, 1.0)
    det = np.linalg.det(uf)
    s = np.sign(det)[..., None] * np.sqrt(1.0 - c * c)
    c_next, c_prev = np.roll(c, -1, axis=2), np.roll(c, 1, axis=2)
    t_next, t_prev = np.roll(theta, -1, axis=2), np.roll(theta, 1, axis=2)
    s_prev = np.roll(s, 1, axis=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = (theta - c_next * t_prev - c_prev * t_next) / (df * sin_t_next * s_prev)
    # faces seen edge-on contribute nothing
    skip = np.any(np.abs(s) <= eps, axis=2) | ~np.all(np.isfinite(w), axis=2)
    w[skip] = 0.0
    weights = np.zeros((len(x), n_c))
    rows = np.repeat(np.arange(len(x)), faces.size)
    np.add.at(weights, (rows, np.tile(faces.ravel(), len(x))), w.reshape(len(x), -1).ravel())
    return weights / weights.sum(axis=1, keepdims=True)


def mean_value_coordinates(x, cage) -> np.ndarray:
    return mvc_matrix(np.asarray(x, dtype=np.float64).reshape(1, 3), cage)[0]


def influence_mask(cage_vertices, keypoints, r=0.3) -> np.ndarray:
    """Cage vertex j is controlled by keypoint i if within ``r``; orphans go to the nearest keypoint."""
    cv = np.asarray(cage_vertices, dtype=np.float64)
    kp = np.asarray(keypoints, dtype=np.float64)
    d2 = np.sum((kp[:, None, :] - cv[None, :, :]) ** 2, axis=2)
    mask = d2 <= r * r
    orphan = ~mask.any(axis=0)
    if orphan.any():
        cols = np.flatnonzero(orphan)
        mask[d2[:, cols].argmin(axis=0), cols] = True
    return mask


def deform_cage(cage_vertices, k_src, k_tgt, influence) -> np.ndarray:
    """Displace every cage vertex by the influence-weighted keypoint displacements."""
    cv = np.asarray(cage_vertices, dtype=np.float64)
    ks, kt = np.asarray(k_src, dtype=np.float64), np.asarray(k_tgt, dtype=np.float64)
    inf = np.asarray(influence, dtype=np.float64)
    if ks.shape != kt.shape or inf.shape != (len(ks), len(cv)):
        raise ValueError(f"deform_cage: shape mismatch keypoints {ks.shape}/{kt.shape}, "
                         f"influence {inf.shape}, cage {cv.shape}")
    return cv + inf.T @ (kt - ks)


def apply_cage(weights, deformed_vertices) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    dv = np.asarray(deformed_vertices, dtype=np.float64)
    if w.shape[1] != len(dv):
        raise ValueError(f"apply_cage: weights {w.shape} do not match {len(dv)} cage vertices")
    return w @ dv


def self_intersection_diagnostic(deformed_vertices, faces) -> int:
    """Number of faces whose normal flipped relative to the original orientation.

    Cheap proxy only; no cage is ever rejected on this basis.
    """
    v = np.asarray(deformed_vertices)[faces]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    c = np.asarray(deformed_vertices).mean(axis=0)
    return int(np.sum(np.einsum("ij,ij->i", n, v[:, 0] - c) < 0))
