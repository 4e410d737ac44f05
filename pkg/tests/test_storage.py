import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import toy_bundle
from kpred.retrieval import build_database
from kpred.storage import (StorageError, decode_blob, encode_blob, load_checkpoint, load_database,
                           read_blob, save_checkpoint, save_database, write_blob)


def test_blob_layout():
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    raw = encode_blob(a)
    assert len(raw) == 20 + 24
    assert raw[:4] == b"KPRD"
    assert struct.unpack("<HHHH", raw[4:12]) == (1, 0, 2, 0)
    assert struct.unpack("<II", raw[12:20]) == (2, 3)
    assert raw[20:] == a.tobytes()


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(st.sampled_from([np.float32, np.float64, np.uint32]),
                  hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=5)))
def test_blob_roundtrip(arr):
    back = decode_blob(encode_blob(arr))
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_blob_int_conversion_and_rejects():
    back = decode_blob(encode_blob(np.array([[0, 7]], dtype=np.int64)))
    assert back.dtype == np.uint32 and back.tolist() == [[0, 7]]
    with pytest.raises(StorageError):
        encode_blob(np.array([-1]))
    with pytest.raises(StorageError):
        encode_blob(np.array([1 + 2j]))


@pytest.mark.parametrize("mutate,field", [
    (lambda r: b"XPRD" + r[4:], "magic"),
    (lambda r: r[:4] + struct.pack("<H", 2) + r[6:], "version"),
    (lambda r: r[:6] + struct.pack("<H", 9) + r[8:], "dtype"),
    (lambda r: r[:10] + struct.pack("<H", 1) + r[12:], "reserved"),
    (lambda r: r[:8], "header"),
    (lambda r: r[:14], "dims"),
    (lambda r: r[:-1], "payload"),
    (lambda r: r + b"\0", "payload"),
])
def test_blob_errors_name_field(mutate, field):
    raw = encode_blob(np.ones((2, 3), dtype=np.float64))
    with pytest.raises(StorageError, match=field):
        decode_blob(mutate(raw))


def test_blob_file_io(tmp_path):
    a = np.random.default_rng(0).normal(size=(4, 5))
    write_blob(a, tmp_path / "a.kprd")
    assert read_blob(tmp_path / "a.kprd").tobytes() == a.tobytes()


def test_checkpoint_roundtrip(tmp_path):
    b = toy_bundle()
    b.meta["note"] = "x"
    save_checkpoint(b, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    assert back.fingerprint() == b.fingerprint()
    assert back.arch == b.arch
    assert back.meta == b.meta
    for n in b.store.params:
        assert back.store[n].data.tobytes() == b.store[n].data.tobytes()
        assert back.store.steps[n] == b.store.steps[n]
    save_checkpoint(back, tmp_path / "ck2")
    for f in (tmp_path / "ck").rglob("*"):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "ck2" / f.relative_to(tmp_path / "ck")).read_bytes()


def test_checkpoint_tamper_detected(tmp_path):
    b = toy_bundle()
    save_checkpoint(b, tmp_path)
    name = sorted(b.store.params)[0]
    arr = read_blob(tmp_path / "params" / f"{name}.kprd").copy()
    arr.reshape(-1)[0] += 1.0
    write_blob(arr, tmp_path / "params" / f"{name}.kprd")
    with pytest.raises(StorageError, match="fingerprint"):
        load_checkpoint(tmp_path)
    (tmp_path / "arch.json").unlink()
    with pytest.raises(StorageError, match="missing arch.json"):
        load_checkpoint(tmp_path)


@pytest.fixture(scope="module")
def toy_db(toy_data):
    b = toy_bundle()
    shapes = [(i, toy_data.points[i], toy_data.meshes[i]) for i in toy_data.split.database]
    return b, build_database(shapes, b, template="icosphere0")


def test_database_save_load_save_identical(tmp_path, toy_db):
    b, db = toy_db
    save_database(db, tmp_path / "a")
    back = load_database(tmp_path / "a", expect_fingerprint=b.fingerprint())
    save_database(back, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
    for r1, r2 in zip(db.records, back.records):
        assert r1.tokens.tobytes() == r2.tokens.tobytes()
        np.testing.assert_array_equal(r1.mesh.faces, r2.mesh.faces)


def test_database_errors(tmp_path, toy_db):
    b, db = toy_db
    save_database(db, tmp_path)
    with pytest.raises(StorageError, match="expected"):
        load_database(tmp_path, expect_fingerprint="0" * 16)
    rid = db.ids[0]
    (tmp_path / "records" / rid / "tokens.kprd").unlink()
    with pytest.raises(StorageError, match="missing"):
        load_database(tmp_path)
    with pytest.raises(StorageError, match="missing manifest"):
        load_database(tmp_path / "nowhere")


def test_empty_database_rejected(tmp_path, toy_db):
    b, db = toy_db
    empty = type(db)([], db.fingerprint)
    save_database(empty, tmp_path)
    with pytest.raises(StorageError, match="empty"):
        load_database(tmp_path)
