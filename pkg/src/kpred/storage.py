"""Bit-exact persistence: ``.kprd`` tensor blobs, checkpoints and token databases.

Blob layout (little-endian)::

    b"KPRD" | version u16 = 1 | dtype u16 | rank u16 | reserved u16 = 0
    | dims: rank x u32 | row-major payload

dtype codes: 0 = f32, 1 = f64, 2 = u32.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .cage import Cage
from .geometry import TriMesh
from .nets import Arch, NetBundle
from .records import ShapeRecord

MAGIC = b"KPRD"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<u4")}
CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("uint32"): 2}
_HEAD = struct.Struct("<4sHHHH")


class StorageError(ValueError):
    pass


def encode_blob(array) -> bytes:
    arr = np.asarray(array)
    if arr.dtype.kind in "iu" and arr.dtype != np.uint32:
        if arr.size and (arr.min() < 0 or arr.max() > 0xFFFFFFFF):
            raise StorageError("integer data does not fit u32")
        arr = arr.astype(np.uint32)
    code = CODES.get(np.dtype(arr.dtype.name))
    if code is None:
        raise StorageError(f"unsupported dtype {arr.dtype}")
    head = _HEAD.pack(MAGIC, VERSION, code, arr.ndim, 0)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + dims + np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()


def decode_blob(raw: bytes, where="blob") -> np.ndarray:
    if len(raw) < _HEAD.size:
        raise StorageError(f"{where}: truncated header")
    magic, version, code, rank, reserved = _HEAD.unpack_from(raw)
    if magic != MAGIC:
        raise StorageError(f"{where}: bad magic {magic!r}")
    if version != VERSION:
        raise StorageError(f"{where}: unsupported version {version}")
    if code not in DTYPES:
        raise StorageError(f"{where}: unknown dtype code {code}")
    if reserved != 0:
        raise StorageError(f"{where}: reserved field is {reserved}, expected 0")
    dims_end = _HEAD.size + 4 * rank
    if len(raw) < dims_end:
        raise StorageError(f"{where}: truncated dims")
    dims = struct.unpack_from(f"<{rank}I", raw, _HEAD.size)
    dt = DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(raw) - dims_end != expected:
        raise StorageError(f"{where}: payload length {len(raw) - dims_end}, expected {expected}")
    return np.frombuffer(raw, dtype=dt, offset=dims_end).reshape(dims).astype(dt.newbyteorder("="))


def write_blob(array, path):
    Path(path).write_bytes(encode_blob(array))


def read_blob(path) -> np.ndarray:
    return decode_blob(Path(path).read_bytes(), str(path))


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ------------------------------------------------------------------ checkpoints

def save_checkpoint(bundle: NetBundle, out, with_optimizer=True):
    """Parameter blobs + ``manifest.json`` + self-describing ``arch.json``."""
    out = Path(out)
    (out / "params").mkdir(parents=True, exist_ok=True)
    store = bundle.store
    entries = {}
    for name in sorted(store.params):
        rel = f"params/{name}.kprd"
        write_blob(store[name].data, out / rel)
        entry = {"path": rel, "shape": list(store[name].shape), "dtype": store.dtype.name}
        if with_optimizer:
            entry["adam_m"] = f"params/{name}.m.kprd"
            entry["adam_v"] = f"params/{name}.v.kprd"
            entry["adam_step"] = store.steps[name]
            write_blob(store.m[name], out / entry["adam_m"])
            write_blob(store.v[name], out / entry["adam_v"])
        entries[name] = entry
    _write_json(out / "arch.json", bundle.arch.to_json())
    _write_json(out / "manifest.json", {"params": entries,
                                        "fingerprint": bundle.fingerprint(), "meta": bundle.meta})
    return out


def load_checkpoint(path) -> NetBundle:
    path = Path(path)
    for name in ("arch.json", "manifest.json"):
        if not (path / name).exists():
            raise StorageError(f"{path}: missing {name}")
    arch = Arch.from_json(json.loads((path / "arch.json").read_text()))
    manifest = json.loads((path / "manifest.json").read_text())
    store = ad.ParamStore(np.dtype(arch.dtype))
    for name, entry in manifest["params"].items():
        arr = read_blob(path / entry["path"])
        if list(arr.shape) != entry["shape"]:
            raise StorageError(f"{path}: {name} has shape {arr.shape}, manifest says {entry['shape']}")
        store.add(name, arr)
        if "adam_m" in entry:
            store.m[name] = read_blob(path / entry["adam_m"])
            store.v[name] = read_blob(path / entry["adam_v"])
            store.steps[name] = int(entry.get("adam_step", 0))
    store.set_trainable(store.params, False)
    bundle = NetBundle(arch, store, manifest.get("meta", {}))
    if manifest.get("fingerprint") and manifest["fingerprint"] != bundle.fingerprint():
        raise StorageError(f"{path}: fingerprint mismatch")
    return bundle


# ------------------------------------------------------------------ databases

RECORD_FILES = ("points", "keypoints", "cage_v", "cage_f", "mvc", "tokens")


def save_database(db, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    records = {}
    for rec in db.records:
        rdir = out / "records" / rec.id
        rdir.mkdir(parents=True, exist_ok=True)
        arrays = {"points": rec.points, "keypoints": rec.keypoints,
                  "cage_v": rec.cage.vertices, "cage_f": rec.cage.faces.astype(np.uint32),
                  "mvc": rec.mvc, "tokens": rec.tokens}
        if rec.mesh is not None:
            arrays.update(mesh_v=rec.mesh.vertices, mesh_f=rec.mesh.faces.astype(np.uint32),
                          mesh_mvc=rec.mesh_mvc)
        files = {}
        for key, arr in arrays.items():
            rel = f"records/{rec.id}/{key}.kprd"
            write_blob(arr, out / rel)
            files[key] = rel
        records[rec.id] = files
    _write_json(out / "manifest.json", {
        "ids": [r.id for r in db.records], "n_keypoints": db.n_keypoints, "token_dim": db.token_dim,
        "bundle_fingerprint": db.fingerprint, "records": records, "meta": db.meta})
    return out


def load_database(path, expect_fingerprint=None):
    from .retrieval import TokenDatabase

    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise StorageError(f"{path}: missing manifest.json")
    manifest = json.loads(mpath.read_text())
    if not manifest["ids"]:
        raise StorageError(f"{path}: empty database")
    if expect_fingerprint is not None and manifest["bundle_fingerprint"] != expect_fingerprint:
        raise StorageError(f"{path}: database built with bundle {manifest['bundle_fingerprint']}, "
                           f"expected {expect_fingerprint}")
    records = []
    for rid in manifest["ids"]:
        files = manifest["records"][rid]
        missing = [k for k in RECORD_FILES if k not in files or not (path / files[k]).exists()]
        if missing:
            raise StorageError(f"{path}: record {rid} missing {missing}")
        a = {k: read_blob(path / rel) for k, rel in files.items()}
        mesh = None
        if "mesh_v" in a:
            mesh = TriMesh(a["mesh_v"], a["mesh_f"].astype(np.int64))
        rec = ShapeRecord(rid, a["points"], Cage(TriMesh(a["cage_v"], a["cage_f"].astype(np.int64)), rid),
                          a["mvc"], mesh=mesh, mesh_mvc=a.get("mesh_mvc"),
                          keypoints=a["keypoints"], tokens=a["tokens"])
        records.append(rec)
    db = TokenDatabase(records, manifest["bundle_fingerprint"], manifest.get("meta", {}))
    if db.n_keypoints != manifest["n_keypoints"] or db.token_dim != manifest["token_dim"]:
        raise StorageError(f"{path}: record shapes disagree with manifest")
    return db
