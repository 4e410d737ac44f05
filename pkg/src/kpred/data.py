"""Procedural furniture families, mesh/point-cloud I/O and dataset splits.

Shapes are unions of axis-aligned (or tilted) boxes. Each box stays a
separate closed component, so the union is watertight in the edge sense
(every edge shared by exactly two faces) without any CSG.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from .geometry import TriMesh, normalize_unit_cube, sample_mesh_surface

FAMILIES = ("table", "chair", "cabinet")

# name: (low, high)
PARAM_RANGES = {
    "table": {
        "top_width": (0.8, 1.6), "top_depth": (0.5, 1.2), "top_thickness": (0.03, 0.12),
        "leg_height": (0.4, 0.9), "leg_thickness": (0.04, 0.14), "leg_inset": (0.0, 0.15),
    },
    "chair": {
        "seat_width": (0.4, 0.7), "seat_depth": (0.4, 0.7), "seat_thickness": (0.03, 0.1),
        "leg_height": (0.3, 0.55), "leg_thickness": (0.03, 0.08),
        "back_height": (0.3, 0.8), "back_tilt": (0.0, 0.35),
    },
    "cabinet": {
        "width": (0.4, 1.2), "depth": (0.3, 0.7), "height": (0.5, 1.6),
        "panel": (0.02, 0.05), "shelves": (0.0, 4.0), "door_split": (0.0, 1.0),
    },
}


class SpecError(ValueError):
    pass


@dataclass
class ShapeSpec:
    family: str
    params: dict
    seed: int = 0

    def validate(self):
        if self.family not in PARAM_RANGES:
            raise SpecError(f"unknown family {self.family!r}")
        ranges = PARAM_RANGES[self.family]
        if set(self.params) != set(ranges):
            raise SpecError(f"{self.family} needs parameters {sorted(ranges)}")
        for k, (lo, hi) in ranges.items():
            v = self.params[k]
            if not (lo <= v <= hi) or (k.endswith("height") and v <= 0):
                raise SpecError(f"{self.family}.{k}={v} outside [{lo}, {hi}]")


@dataclass
class DatasetSplit:
    database: list
    train: list
    test: list

    def __post_init__(self):
        sets = [set(self.database), set(self.train), set(self.test)]
        if not all(sets):
            raise ValueError("every split must be non-empty")
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ValueError("splits overlap")

    def of(self, name):
        return {"database": self.database, "db": self.database,
                "train": self.train, "test": self.test}[name]


# ------------------------------------------------------------------ boxes

_BOX_FACES = np.array([
    [0, 2, 1], [0, 3, 2],   # z-
    [4, 5, 6], [4, 6, 7],   # z+
    [0, 1, 5], [0, 5, 4],   # y-
    [3, 7, 6], [3, 6, 2],   # y+
    [0, 4, 7], [0, 7, 3],   # x-
    [1, 2, 6], [1, 6, 5],   # x+
])


def box(lo, hi, rotate_x=0.0, pivot=None):
    """8 vertices / 12 outward triangles; optional tilt about the x axis through ``pivot``."""
    (x0, y0, z0), (x1, y1, z1) = lo, hi
    v = np.array([[x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
                  [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1]], dtype=np.float64)
    if rotate_x:
        c, s = math.cos(rotate_x), math.sin(rotate_x)
        rot = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
        p = np.asarray(pivot, dtype=np.float64)
        v = (v - p) @ rot.T + p
    return v, _BOX_FACES.copy()


def union(boxes) -> TriMesh:
    verts, faces, off = [], [], 0
    for v, f in boxes:
        verts.append(v)
        faces.append(f + off)
        off += len(v)
    return TriMesh(np.concatenate(verts), np.concatenate(faces))


def _table(p):
    w, d, t = p["top_width"], p["top_depth"], p["top_thickness"]
    h, lt, inset = p["leg_height"], p["leg_thickness"], p["leg_inset"]
    parts = [box((-w / 2, h, -d / 2), (w / 2, h + t, d / 2))]
    for sx in (-1, 1):
        for sz in (-1, 1):
            cx = sx * (w / 2 - inset * w / 2 - lt / 2)
            cz = sz * (d / 2 - inset * d / 2 - lt / 2)
            parts.append(box((cx - lt / 2, 0.0, cz - lt / 2), (cx + lt / 2, h, cz + lt / 2)))
    return parts


def _chair(p):
    w, d, t = p["seat_width"], p["seat_depth"], p["seat_thickness"]
    h, lt = p["leg_height"], p["leg_thickness"]
    bh, tilt = p["back_height"], p["back_tilt"]
    parts = [box((-w / 2, h, -d / 2), (w / 2, h + t, d / 2))]
    for sx in (-1, 1):
        for sz in (-1, 1):
            cx, cz = sx * (w / 2 - lt / 2), sz * (d / 2 - lt / 2)
            parts.append(box((cx - lt / 2, 0.0, cz - lt / 2), (cx + lt / 2, h, cz + lt / 2)))
    # backrest leans towards -z, hinged at the rear top edge of the seat
    parts.append(box((-w / 2, h + t, -d / 2), (w / 2, h + t + bh, -d / 2 + t),
                     rotate_x=-tilt, pivot=(0.0, h + t, -d / 2)))
    return parts


def _cabinet(p):
    w, d, hgt, pn = p["width"], p["depth"], p["height"], p["panel"]
    shelves = int(round(p["shelves"]))
    parts = [
        box((-w / 2, 0.0, -d / 2), (-w / 2 + pn, hgt, d / 2)),
        box((w / 2 - pn, 0.0, -d / 2), (w / 2, hgt, d / 2)),
        box((-w / 2 + pn, hgt - pn, -d / 2), (w / 2 - pn, hgt, d / 2)),
        box((-w / 2 + pn, 0.0, -d / 2), (w / 2 - pn, pn, d / 2)),
        box((-w / 2 + pn, pn, -d / 2), (w / 2 - pn, hgt - pn, -d / 2 + pn)),
    ]
    for k in range(shelves):
        y = pn + (k + 1) * (hgt - 2 * pn) / (shelves + 1)
        parts.append(box((-w / 2 + pn, y - pn / 2, -d / 2 + pn), (w / 2 - pn, y + pn / 2, d / 2)))
    # one door, or two doors split at door_split of the width (>= 0.5 means two)
    inner = w - 2 * pn
    if p["door_split"] < 0.5:
        parts.append(box((-w / 2 + pn, pn, d / 2), (w / 2 - pn, hgt - pn, d / 2 + pn)))
    else:
        mid = -w / 2 + pn + inner * (0.3 + 0.8 * (p["door_split"] - 0.5))
        mid = min(max(mid, -w / 2 + pn + 0.05 * inner), w / 2 - pn - 0.05 * inner)
        parts.append(box((-w / 2 + pn, pn, d / 2), (mid, hgt - pn, d / 2 + pn)))
        parts.append(box((mid, pn, d / 2), (w / 2 - pn, hgt - pn, d / 2 + pn)))
    return parts


_BUILDERS = {"table": _table, "chair": _chair, "cabinet": _cabinet}


def generate_shape(spec: ShapeSpec) -> TriMesh:
    spec.validate()
    mesh = union(_BUILDERS[spec.family](spec.params))
    mesh.check()
    return mesh


def table_bbox(p):
    """Closed-form bounding box of a generated table."""
    w, d = p["top_width"], p["top_depth"]
    return (np.array([-w / 2, 0.0, -d / 2]),
            np.array([w / 2, p["leg_height"] + p["top_thickness"], d / 2]))


# ------------------------------------------------------------------ datasets

def sample_specs(family, n, seed):
    if family not in PARAM_RANGES:
        raise SpecError(f"unknown family {family!r}")
    ranges = PARAM_RANGES[family]
    names = sorted(ranges)
    unit = qmc.LatinHypercube(d=len(names), seed=np.random.default_rng(seed)).random(n)
    lo = np.array([ranges[k][0] for k in names])
    hi = np.array([ranges[k][1] for k in names])
    vals = lo + unit * (hi - lo)
    return [ShapeSpec(family, {k: float(v) for k, v in zip(names, row)}, seed=seed)
            for row in vals]


@dataclass
class Dataset:
    family: str
    specs: dict
    split: DatasetSplit
    points: dict = field(default_factory=dict)
    meshes: dict = field(default_factory=dict)
    root: Path | None = None

    def items(self, split):
        return [(i, self.points[i]) for i in self.split.of(split)]


def shape_ids(family, n, offset=0):
    return [f"{family}_{offset + k:05d}" for k in range(n)]


def generate_dataset(family, counts, seed=0, n_points=512):
    """Latin-hypercube specs split into database/train/test; points are unit-cube normalized.

    Meshes are normalized with the same transform as their points.
    """
    n_db, n_train, n_test = counts
    total = n_db + n_train + n_test
    specs = sample_specs(family, total, seed)
    ids = shape_ids(family, total)
    split = DatasetSplit(ids[:n_db], ids[n_db:n_db + n_train], ids[n_db + n_train:])
    ds = Dataset(family, dict(zip(ids, specs)), split)
    for k, (sid, spec) in enumerate(zip(ids, specs)):
        mesh = generate_shape(spec)
        raw = sample_mesh_surface(mesh, n_points, seed=seed * 1_000_003 + k)
        pts, tf = normalize_unit_cube(raw)
        ds.points[sid] = pts
        ds.meshes[sid] = TriMesh(tf.apply(mesh.vertices), mesh.faces)
    return ds


def save_dataset(ds: Dataset, out):
    out = Path(out)
    (out / "meshes").mkdir(parents=True, exist_ok=True)
    (out / "points").mkdir(parents=True, exist_ok=True)
    membership = {}
    for name in ("database", "train", "test"):
        for sid in ds.split.of(name):
            membership[sid] = name
    shapes = []
    for sid, spec in ds.specs.items():
        save_obj(ds.meshes[sid], out / "meshes" / f"{sid}.obj")
        save_ply(ds.points[sid], out / "points" / f"{sid}.ply")
        shapes.append({"id": sid, "split": membership[sid], "seed": spec.seed,
                       "params": spec.params,
                       "mesh": f"meshes/{sid}.obj", "points": f"points/{sid}.ply"})
    manifest = {"family": ds.family, "n_points": int(len(next(iter(ds.points.values())))),
                "splits": {"database": ds.split.database, "train": ds.split.train, "test": ds.split.test},
                "shapes": shapes}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    ds.root = out
    return out / "manifest.json"


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    specs, points, meshes = {}, {}, {}
    for s in manifest["shapes"]:
        specs[s["id"]] = ShapeSpec(manifest["family"], s["params"], s.get("seed", 0))
        points[s["id"]] = load_ply(root / s["points"])
        meshes[s["id"]] = load_obj(root / s["mesh"])
    sp = manifest["splits"]
    return Dataset(manifest["family"], specs, DatasetSplit(sp["database"], sp["train"], sp["test"]),
                   points, meshes, root)


# ------------------------------------------------------------------ OBJ

class FormatError(ValueError):
    pass


def save_obj(mesh, path):
    """Write ``v``/``f`` records (1-based); a bare point array writes vertices only."""
    if isinstance(mesh, TriMesh):
        verts, faces = mesh.vertices, mesh.faces
    else:
        verts, faces = np.asarray(mesh, dtype=np.float64), np.zeros((0, 3), dtype=np.int64)
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in verts.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path) -> TriMesh:
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
                if len(verts[-1]) != 3:
                    raise ValueError("vertex needs 3 coordinates")
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    k = int(tok.split("/")[0])
                    idx.append(k - 1 if k > 0 else len(verts) + k)
                if len(idx) < 3:
                    raise ValueError("face needs at least 3 vertices")
                faces += [[idx[0], idx[i], idx[i + 1]] for i in range(1, len(idx) - 1)]
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    try:
        return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                       np.array(faces, dtype=np.int64).reshape(-1, 3))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


# ------------------------------------------------------------------ PLY

_PLY_TYPES = {"float": "f", "float32": "f", "double": "d", "float64": "d",
              "int": "i", "int32": "i", "uint": "I", "uint32": "I",
              "uchar": "B", "uint8": "B", "char": "b", "int8": "b",
              "short": "h", "int16": "h", "ushort": "H", "uint16": "H"}


def save_ply(points, path, binary=True, dtype="double"):
    """Point cloud as a PLY ``vertex`` element with x/y/z properties."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (f"ply\nformat {fmt} 1.0\nelement vertex {len(pts)}\n"
              f"property {dtype} x\nproperty {dtype} y\nproperty {dtype} z\nend_header\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            np_dtype = "<f8" if dtype == "double" else "<f4"
            fh.write(pts.astype(np_dtype).tobytes())
        else:
            fh.write("".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in pts.tolist()).encode("ascii"))


def load_ply(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    body_start = raw.index(b"\n", end) + 1
    header = raw[:body_start].decode("ascii").splitlines()
    fmt, elements, current = None, [], None
    for lineno, line in enumerate(header, 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            current = {"name": parts[1], "count": int(parts[2]), "props": []}
            elements.append(current)
        elif parts[0] == "property":
            if current is None:
                raise FormatError(f"{path}:{lineno}: property before element")
            if parts[1] == "list":
                current["props"].append((parts[4], "list", parts[2], parts[3]))
            elif parts[1] in _PLY_TYPES:
                current["props"].append((parts[2], parts[1]))
            else:
                raise FormatError(f"{path}:{lineno}: unknown property type {parts[1]!r}")
    if fmt not in ("ascii", "binary_little_endian"):
        raise FormatError(f"{path}: unsupported format {fmt!r}")
    vertex = next((e for e in elements if e["name"] == "vertex"), None)
    if vertex is None:
        raise FormatError(f"{path}: no vertex element")
    names = [p[0] for p in vertex["props"]]
    if not {"x", "y", "z"} <= set(names):
        raise FormatError(f"{path}: vertex element lacks x/y/z")
    cols = [names.index(c) for c in "xyz"]

    if fmt == "ascii":
        lines = raw[body_start:].decode("ascii").splitlines()
        out = []
        pos = 0
        for e in elements:
            for _ in range(e["count"]):
                while pos < len(lines) and not lines[pos].strip():
                    pos += 1
                if pos >= len(lines):
                    raise FormatError(f"{path}: truncated at element {e['name']}")
                if e is vertex:
                    vals = lines[pos].split()
                    try:
                        out.append([float(vals[c]) for c in cols])
                    except (ValueError, IndexError):
                        raise FormatError(f"{path}:{len(header) + pos + 1}: bad vertex record") from None
                pos += 1
            if e is vertex:
                break
        return np.array(out, dtype=np.float64).reshape(-1, 3)

    offset = body_start
    for e in elements:
        if any(p[1] == "list" for p in e["props"]):
            if e is vertex:
                raise FormatError(f"{path}: list properties on vertex unsupported")
            break
        fmt_s = "<" + "".join(_PLY_TYPES[p[1]] for p in e["props"])
        size = struct.calcsize(fmt_s)
        if e is vertex:
            n = e["count"]
            if offset + n * size > len(raw):
                raise FormatError(f"{path}: truncated vertex data at byte {len(raw)}")
            dt = np.dtype([(p[0], "<" + _PLY_TYPES[p[1]]) for p in e["props"]])
            rec = np.frombuffer(raw, dtype=dt, count=n, offset=offset)
            return np.stack([rec[c].astype(np.float64) for c in "xyz"], axis=1)
        offset += e["count"] * size
    raise FormatError(f"{path}: vertex element not reachable")
