import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from kpred.cli import main
from kpred.data import load_dataset, load_obj, save_ply
from kpred.storage import load_checkpoint

SMALL = {"n_keypoints": 3, "cage_template": "icosphere0", "feat_dim": 16, "token_dim": 4,
         "decoder_points": 8, "attn_layers": 1, "heads": 2, "epochs": 1, "batch": 2,
         "steps_per_epoch": 2, "warmup_steps": 0}


def write_cfg(path, **kw):
    path.write_text(json.dumps({**SMALL, **kw}))
    return str(path)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """Tiny end-to-end pipeline driven through the command line."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--family", "table", "--db", "4", "--train", "4", "--test", "2",
                 "--points", "64", "--seed", "1", "--out", str(root / "data")]) == 0
    assert main(["train-deform", "--config", write_cfg(root / "d.json", data="data", out="deform")]) == 0
    assert main(["train-retrieval", "--config",
                 write_cfg(root / "r.json", data="data", out="ret", deform_ckpt="deform/checkpoint")]) == 0
    assert main(["train-partial", "--config",
                 write_cfg(root / "p.json", data="data", out="part", bundle_ckpt="ret/checkpoint")]) == 0
    assert main(["build-db", "--shapes", str(root / "data"), "--bundle", str(root / "part/checkpoint"),
                 "--out", str(root / "db"), "--verify"]) == 0
    return root


def test_gen_data_rerun_identical(tmp_path):
    args = ["gen-data", "--family", "chair", "--db", "2", "--train", "2", "--test", "1", "--points", "32"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    assert main(args + ["--seed", "9", "--out", str(tmp_path / "c")]) == 0
    assert tree_bytes(tmp_path / "a") != tree_bytes(tmp_path / "c")


def test_gen_data_bad_family(tmp_path, capsys):
    assert main(["gen-data", "--family", "sofa", "--out", str(tmp_path)]) == 2
    assert "sofa" in capsys.readouterr().err
    assert main(["gen-data", "--family", "table", "--db", "0", "--out", str(tmp_path)]) == 2


def test_training_outputs(run):
    for stage in ("deform", "ret", "part"):
        rows = read_rows(run / stage / "loss.csv")
        assert len(rows) == 2  # one row per optimizer step
        lock = json.loads((run / stage / "config.lock.json").read_text())
        assert lock["steps_per_epoch"] == 2
        assert (run / stage / "checkpoint" / "manifest.json").exists()
    assert list(read_rows(run / "deform/loss.csv")[0]) == ["epoch", "step", "L_sim", "L_kpt", "L_def"]
    meta = load_checkpoint(run / "part/checkpoint").meta
    assert meta["stages"] == ["deform", "retrieval", "partial"]


def test_zero_epochs_writes_initial_checkpoint(run, tmp_path):
    cfg = write_cfg(tmp_path / "z.json", data=str(run / "data"), out=str(tmp_path / "z"), epochs=0)
    assert main(["train-deform", "--config", cfg]) == 0
    assert sorted(p.name for p in (tmp_path / "z").iterdir()) == ["checkpoint", "config.lock.json"]
    cfg2 = write_cfg(tmp_path / "z2.json", data=str(run / "data"), out=str(tmp_path / "z2"), epochs=0)
    assert main(["train-deform", "--config", cfg2]) == 0
    assert tree_bytes(tmp_path / "z/checkpoint") == tree_bytes(tmp_path / "z2/checkpoint")


def test_config_errors(run, tmp_path, capsys):
    cfg = write_cfg(tmp_path / "m.json", data=str(run / "data"), out=str(tmp_path / "o"),
                    deform_ckpt=str(tmp_path / "none"))
    assert main(["train-retrieval", "--config", cfg]) == 2
    assert "missing prerequisite" in capsys.readouterr().err
    bad = write_cfg(tmp_path / "u.json", data=str(run / "data"), out=str(tmp_path / "o"), learning_rate=1)
    assert main(["train-deform", "--config", bad]) == 2
    assert "learning_rate" in capsys.readouterr().err
    (tmp_path / "j.json").write_text("{not json")
    assert main(["train-deform", "--config", str(tmp_path / "j.json")]) == 2
    neg = write_cfg(tmp_path / "n.json", data=str(run / "data"), out=str(tmp_path / "o"), lambda_kpt=-1)
    assert main(["train-deform", "--config", neg]) == 2
    flag = write_cfg(tmp_path / "f.json", data=str(run / "data"), out=str(tmp_path / "o"),
                     deform_ckpt=str(run / "deform/checkpoint"), gsa=False)
    assert main(["train-retrieval", "--config", flag]) == 2


def test_seeded_rerun_identical_checkpoint(run, tmp_path):
    cfg = write_cfg(tmp_path / "d.json", data=str(run / "data"), out=str(tmp_path / "d"))
    assert main(["train-deform", "--config", cfg]) == 0
    assert tree_bytes(tmp_path / "d/checkpoint") == tree_bytes(run / "deform/checkpoint")
    assert (tmp_path / "d/loss.csv").read_bytes() == (run / "deform/loss.csv").read_bytes()


def test_verify_db(run, tmp_path, capsys):
    assert main(["verify-db", "--db", str(run / "db"), "--bundle", str(run / "part/checkpoint")]) == 0
    assert "ok: 4 records" in capsys.readouterr().out
    # a database built by an older bundle is refused
    assert main(["verify-db", "--db", str(run / "db"), "--bundle", str(run / "deform/checkpoint")]) == 2


def test_red_on_database_shape(run, tmp_path):
    ds = load_dataset(run / "data")
    sid = ds.split.database[2]
    scale = 3.0
    save_ply(ds.points[sid] * scale + 1.0, tmp_path / "t.ply")
    assert main(["red", "--db", str(run / "db"), "--bundle", str(run / "part/checkpoint"),
                 "--target", str(tmp_path / "t.ply"), "--out", str(tmp_path / "o")]) == 0
    res = json.loads((tmp_path / "o/result.json").read_text())
    assert res["best_id"] == sid
    assert res["best_metric"] < 1e-4
    assert len(res["candidates"]) == 4
    assert [c["rank"] for c in res["candidates"]] == [0, 1, 2, 3]
    best = next(c for c in res["candidates"] if c["id"] == sid)
    mesh = load_obj(tmp_path / "o" / best["obj"])
    # written back in the target's frame
    np.testing.assert_allclose(mesh.vertices, ds.meshes[sid].vertices * scale + 1.0, atol=1e-3)

    assert main(["red", "--db", str(run / "db"), "--bundle", str(run / "part/checkpoint"), "--topk", "1",
                 "--target", str(tmp_path / "t.ply"), "--out", str(tmp_path / "o1")]) == 0
    assert len(json.loads((tmp_path / "o1/result.json").read_text())["candidates"]) == 1
    assert main(["red", "--db", str(run / "db"), "--bundle", str(run / "part/checkpoint"),
                 "--target", str(tmp_path / "missing.ply"), "--out", str(tmp_path / "o2")]) == 1


def test_eval_summary_rows(run, tmp_path, capsys):
    out = tmp_path / "e.csv"
    assert main(["eval", "--db", str(run / "db"), "--bundle", str(run / "part/checkpoint"), "--topk", "3",
                 "--occlusion", "0.25", "0.5", "--slices", "2", "--out", str(out)]) == 0
    rows = read_rows(out)
    assert list(rows[0]) == ["target_id", "rank", "candidate_id", "token_distance", "metric_cd_or_ucd",
                             "best_flag", "occlusion"]
    summaries = [r for r in rows if r["target_id"] == "summary"]
    assert [float(r["occlusion"]) for r in summaries] == [0.25, 0.5]
    for s in summaries:
        occ_rows = [r for r in rows if r["target_id"] != "summary" and r["occlusion"] == s["occlusion"]]
        best = [float(r["metric_cd_or_ucd"]) for r in occ_rows if r["best_flag"] == "1"]
        assert len(best) == 2 * 2  # 2 test shapes x 2 slices
        assert float(s["metric_cd_or_ucd"]) == pytest.approx(np.mean(best), rel=1e-12)
        per_target = {}
        for r in occ_rows:
            per_target.setdefault(r["target_id"], []).append(float(r["metric_cd_or_ucd"]))
        assert all(len(v) == 3 for v in per_target.values())
        assert sorted(best) == sorted(min(v) for v in per_target.values())
    printed = capsys.readouterr().out
    assert printed.count("mean best-of-3 UCD") == 2


def test_eval_full_topk_one(run, tmp_path):
    out = tmp_path / "e.csv"
    assert main(["eval", "--db", str(run / "db"), "--bundle", str(run / "part/checkpoint"), "--topk", "1",
                 "--out", str(out)]) == 0
    rows = [r for r in read_rows(out) if r["target_id"] != "summary"]
    assert len(rows) == 2 and all(r["best_flag"] == "1" for r in rows)


def test_eval_flag_mismatch(run, tmp_path, capsys):
    assert main(["eval", "--db", str(run / "db"), "--bundle", str(run / "part/checkpoint"), "--no-gsa",
                 "--out", str(tmp_path / "e.csv")]) == 2
    assert "gsa" in capsys.readouterr().err
    assert main(["eval", "--db", str(run / "db"), "--bundle", str(run / "part/checkpoint"),
                 "--occlusion", "1.5", "--out", str(tmp_path / "e.csv")]) == 2


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "kpred.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("gen-data", "train-deform", "train-retrieval", "train-partial", "build-db", "red", "eval"):
        assert cmd in out.stdout
