from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cage import Cage, build_cage, mvc_matrix
from .geometry import TriMesh, farthest_point_sampling


@dataclass
class ShapeRecord:
    """A source shape ready for deformation (and, once tokenized, retrieval).

    ``points`` are normalized; ``mesh`` (optional) lives in the same frame
    and is enclosed by the cage too. ``mesh_mvc`` holds its vertices' MVC rows.
    """

    id: str
    points: np.ndarray
    cage: Cage
    mvc: np.ndarray
    mesh: TriMesh | None = None
    mesh_mvc: np.ndarray | None = None
    keypoints: np.ndarray | None = None
    tokens: np.ndarray | None = None
    fps: np.ndarray | None = None

    @property
    def global_token(self):
        return None if self.tokens is None else self.tokens.reshape(-1)

    def fps_targets(self, k):
        if self.fps is None or len(self.fps) != k:
            self.fps = self.points[farthest_point_sampling(self.points, k)]
        return self.fps


def make_record(shape_id, points, mesh=None, template="icosphere1", margin=1.2) -> ShapeRecord:
    pts = np.asarray(points, dtype=np.float64)
    enclose = pts if mesh is None else np.concatenate([pts, mesh.vertices])
    cage = build_cage(enclose, template=template, margin=margin, shape_id=shape_id)
    rec = ShapeRecord(shape_id, pts, cage, mvc_matrix(pts, cage), mesh=mesh)
    if mesh is not None:
        rec.mesh_mvc = mvc_matrix(mesh.vertices, cage)
    return rec
