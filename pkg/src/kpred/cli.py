"""``kpred`` command line: gen-data, train-*, build-db, red, eval.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nets, storage
from .cage import cage_template
from .data import FAMILIES, SpecError, generate_dataset, load_dataset, load_obj, load_ply, save_dataset, save_obj
from .deform import TrainConfig, TrainingAborted, train_deform, train_partial
from .geometry import TriMesh, normalize_unit_cube
from .records import make_record
from .retrieval import StaleDatabase, build_database, evaluate_topk, query_tokens, red, train_retrieval

log = logging.getLogger("kpred")


class UsageError(Exception):
    pass


ARCH_KEYS = {"n_keypoints", "cage_template", "feat_dim", "token_dim", "decoder_points",
             "attn_layers", "heads", "radius", "dtype"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
PATH_KEYS = {"data", "out", "deform_ckpt", "bundle_ckpt"}
FLAG_KEYS = {"gsa", "lgf"}
CONFIG_KEYS = ARCH_KEYS | TRAIN_KEYS | PATH_KEYS | FLAG_KEYS | {"n_points", "init_seed"}


@dataclass
class RunConfig:
    raw: dict
    base: Path

    def path(self, key, required=True):
        v = self.raw.get(key)
        if v is None:
            if required:
                raise UsageError(f"config needs {key!r}")
            return None
        p = Path(v)
        return (p if p.is_absolute() else self.base / p).resolve()

    def train_config(self):
        return TrainConfig(**{k: v for k, v in self.raw.items() if k in TRAIN_KEYS})

    def arch(self, n_points):
        kw = {k: v for k, v in self.raw.items() if k in ARCH_KEYS | FLAG_KEYS}
        kw["n_points"] = int(self.raw.get("n_points") or n_points)
        template = kw.get("cage_template", "icosphere1")
        kw["n_cage"] = len(cage_template(template)[0])
        return nets.Arch(**kw)

    def lock(self):
        out = dict(self.raw)
        for k in PATH_KEYS:
            if k in out:
                out[k] = str(self.path(k))
        return out


def read_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    unknown = sorted(set(raw) - CONFIG_KEYS)
    if unknown:
        raise UsageError(f"unknown config keys: {unknown}")
    cfg = RunConfig(raw, path.resolve().parent)
    try:
        cfg.train_config()
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    return cfg


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_history(path, history, keys):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "step", *keys])
        for h in history:
            w.writerow([h["epoch"], h["step"], *(repr(float(h[k])) for k in keys)])


def _records(ds, split, arch):
    return [make_record(i, ds.points[i], ds.meshes.get(i), template=arch.cage_template)
            for i in ds.split.of(split)]


def _load_dataset(path):
    if not (Path(path) / "manifest.json").exists():
        raise UsageError(f"{path} is not a dataset directory (no manifest.json)")
    return load_dataset(path)


def _load_bundle(path, what):
    if path is None or not (Path(path) / "manifest.json").exists():
        raise UsageError(f"missing prerequisite {what} checkpoint: {path}")
    return storage.load_checkpoint(path)


def _finish(bundle, out, history, keys, cfg, stage):
    bundle.meta.setdefault("stages", [])
    if stage not in bundle.meta["stages"]:
        bundle.meta["stages"].append(stage)
    storage.save_checkpoint(bundle, out / "checkpoint")
    if history:
        _write_history(out / "loss.csv", history, keys)
    _write_json(out / "config.lock.json", cfg.lock())


def _train(cfg: RunConfig, stage):
    out = cfg.path("out")
    out.mkdir(parents=True, exist_ok=True)
    ds = _load_dataset(cfg.path("data"))
    tc = cfg.train_config()
    if stage == "deform":
        n_pts = len(next(iter(ds.points.values())))
        bundle = nets.init_bundle(cfg.arch(n_pts), seed=int(cfg.raw.get("init_seed", tc.seed)))
        keys = ("L_sim", "L_kpt", "L_def")
        runner = train_deform
    elif stage == "retrieval":
        bundle = _load_bundle(cfg.path("deform_ckpt", required=False), "deformation")
        keys = ("L_rec_x", "L_rec_x2y", "L_ret")
        runner = train_retrieval
    else:
        bundle = _load_bundle(cfg.path("bundle_ckpt", required=False), "full-model")
        keys = ("L_usim", "L_wkpt", "L_pdef")
        runner = train_partial
    for flag in FLAG_KEYS & set(cfg.raw):
        if getattr(bundle.arch, flag) != cfg.raw[flag]:
            raise UsageError(f"config {flag}={cfg.raw[flag]} disagrees with checkpoint arch.json")
    if tc.epochs == 0:
        _finish(bundle, out, [], keys, cfg, stage)
        return 0
    sources = _records(ds, "database", bundle.arch)
    targets = ds.items("train")
    try:
        history = runner(sources, targets, bundle, tc)
    except TrainingAborted as exc:
        log.error("training aborted: %s; writing last good checkpoint", exc)
        bundle.store.params = exc.last_good.params
        _finish(bundle, out, exc.history, keys, cfg, stage + "-aborted")
        return 1
    _finish(bundle, out, history, keys, cfg, stage)
    return 0


# ------------------------------------------------------------------ commands

def cmd_gen_data(args):
    if args.family not in FAMILIES:
        raise UsageError(f"unknown family {args.family!r}; choose from {', '.join(FAMILIES)}")
    if min(args.db, args.train, args.test) < 1:
        raise UsageError("split counts must be positive")
    ds = generate_dataset(args.family, (args.db, args.train, args.test), args.seed, args.points)
    save_dataset(ds, args.out)
    return 0


def _shape_source(path, split):
    path = Path(path)
    if (path / "manifest.json").exists():
        ds = load_dataset(path)
        return [(i, ds.points[i], ds.meshes.get(i)) for i in ds.split.of(split)], str(path.resolve())
    shapes = []
    for ply in sorted(path.glob("*.ply")):
        pts, tf = normalize_unit_cube(load_ply(ply))
        obj = ply.with_suffix(".obj")
        mesh = None
        if obj.exists():
            m = load_obj(obj)
            mesh = TriMesh(tf.apply(m.vertices), m.faces)
        shapes.append((ply.stem, pts, mesh))
    if not shapes:
        raise UsageError(f"no shapes found in {path}")
    return shapes, None


def verify_database(db, bundle):
    """Ids whose stored tokens differ from tokens regenerated from stored points."""
    bad = []
    for rec in db.records:
        tokens, _, _ = query_tokens(rec.points, bundle)
        if tokens.shape != rec.tokens.shape or not np.array_equal(tokens, rec.tokens):
            bad.append(rec.id)
    return bad


def cmd_build_db(args):
    bundle = _load_bundle(args.bundle, "bundle")
    shapes, dataset = _shape_source(args.shapes, args.split)
    db = build_database(shapes, bundle)
    db.meta["dataset"] = dataset
    db.meta["split"] = args.split
    storage.save_database(db, args.out)
    if args.verify:
        bad = verify_database(storage.load_database(args.out, bundle.fingerprint()), bundle)
        if bad:
            log.error("token regeneration mismatch for %s", bad)
            return 1
    return 0


def cmd_verify_db(args):
    bundle = _load_bundle(args.bundle, "bundle")
    db = storage.load_database(args.db, bundle.fingerprint())
    bad = verify_database(db, bundle)
    if bad:
        print("mismatch:", " ".join(bad))
        return 1
    print(f"ok: {len(db)} records")
    return 0


def _check_flags(bundle, args):
    for flag in ("gsa", "lgf"):
        want = not getattr(args, f"no_{flag}")
        if getattr(bundle.arch, flag) != want:
            raise UsageError(f"checkpoint arch.json has {flag}={getattr(bundle.arch, flag)}, "
                             f"evaluation expects {flag}={want}")


def cmd_red(args):
    bundle = _load_bundle(args.bundle, "bundle")
    _check_flags(bundle, args)
    db = storage.load_database(args.db, bundle.fingerprint())
    try:
        raw = load_ply(args.target)
    except (OSError, ValueError) as exc:
        log.error("cannot read target %s: %s", args.target, exc)
        return 1
    pts, tf = normalize_unit_cube(raw)
    cands, _ = red(pts, db, bundle, k=args.topk, partial=args.partial, with_mesh=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    listing = []
    for c in cands:
        name = f"cand_{c['rank']:02d}_{c['candidate_id']}.obj"
        rec = db.by_id(c["candidate_id"])
        if c["deformed_mesh"] is not None:
            save_obj(TriMesh(tf.inverse(c["deformed_mesh"]), rec.mesh.faces), out / name)
        else:
            save_obj(tf.inverse(c["deformed"]), out / name)
        listing.append({"rank": c["rank"], "id": c["candidate_id"], "token_distance": c["token_distance"],
                        "metric": c["metric"], "metric_undeformed": c["metric_undeformed"], "obj": name})
    best = next(c for c in cands if c["best"])
    _write_json(out / "result.json", {
        "target": str(Path(args.target).resolve()), "partial": args.partial,
        "metric": "ucd" if args.partial else "cd", "candidates": listing,
        "best_id": best["candidate_id"], "best_metric": best["metric"]})
    return 0


EVAL_COLUMNS = ["target_id", "rank", "candidate_id", "token_distance", "metric_cd_or_ucd", "best_flag",
                "occlusion"]


def cmd_eval(args):
    bundle = _load_bundle(args.bundle, "bundle")
    _check_flags(bundle, args)
    db = storage.load_database(args.db, bundle.fingerprint())
    shapes_dir = args.shapes or db.meta.get("dataset")
    if not shapes_dir:
        raise UsageError("database does not record its dataset; pass --shapes")
    ds = _load_dataset(shapes_dir)
    targets = ds.items(args.split)
    trained_cb = bundle.meta.get("partial_cb")
    if trained_cb is not None and trained_cb == args.no_cb:
        log.warning("partial predictor was trained with cb=%s but evaluation uses cb=%s",
                    trained_cb, not args.no_cb)
    occlusions = args.occlusion or [0.0]
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_COLUMNS)
        for occ in occlusions:
            if not 0.0 <= occ < 1.0:
                raise UsageError(f"occlusion must be in [0, 1), got {occ}")
            partial = occ > 0 or args.partial
            res = evaluate_topk(targets, db, bundle, k=args.topk, partial=partial, occlusion=occ,
                                seed=args.seed, cb=not args.no_cb, slices_per_target=args.slices)
            for r in res.rows:
                w.writerow([r["target_id"], r["rank"], r["candidate_id"], repr(r["token_distance"]),
                            repr(r["metric_cd_or_ucd"]), r["best_flag"], repr(occ)])
            w.writerow(["summary", "", "", "", repr(res.summary), "", repr(occ)])
            print(f"occlusion {occ}: mean best-of-{args.topk} {'UCD' if partial else 'CD'} = {res.summary:.6f}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="kpred", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--family", required=True)
    g.add_argument("--db", type=int, default=50)
    g.add_argument("--train", type=int, default=200)
    g.add_argument("--test", type=int, default=50)
    g.add_argument("--points", type=int, default=512)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    for stage in ("deform", "retrieval", "partial"):
        t = sub.add_parser(f"train-{stage}", help=f"train the {stage} stage")
        t.add_argument("--config", required=True)
        t.set_defaults(fn=lambda a, s=stage: _train(read_config(a.config), s))

    b = sub.add_parser("build-db", help="tokenize shapes into a database")
    b.add_argument("--shapes", required=True)
    b.add_argument("--bundle", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--split", default="database")
    b.add_argument("--verify", action="store_true")
    b.set_defaults(fn=cmd_build_db)

    v = sub.add_parser("verify-db", help="regenerate tokens and compare with the stored ones")
    v.add_argument("--db", required=True)
    v.add_argument("--bundle", required=True)
    v.set_defaults(fn=cmd_verify_db)

    for name, fn in (("red", cmd_red), ("eval", cmd_eval)):
        c = sub.add_parser(name, help="retrieve and deform" if name == "red" else "evaluate a split")
        c.add_argument("--db", required=True)
        c.add_argument("--bundle", required=True)
        c.add_argument("--partial", action="store_true")
        c.add_argument("--topk", type=int, default=10)
        c.add_argument("--no-gsa", action="store_true")
        c.add_argument("--no-lgf", action="store_true")
        c.add_argument("--out", required=True)
        c.set_defaults(fn=fn)
        if name == "red":
            c.add_argument("--target", required=True)
        else:
            c.add_argument("--split", default="test")
            c.add_argument("--shapes")
            c.add_argument("--occlusion", type=float, nargs="+")
            c.add_argument("--slices", type=int, default=1)
            c.add_argument("--no-cb", action="store_true")
            c.add_argument("--seed", type=int, default=0)
    return p


@contextlib.contextmanager
def _thread_limit():
    n = os.environ.get("KPRED_THREADS")
    if not n:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=int(n)):
        yield


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.fn(args)
    except (UsageError, SpecError, StaleDatabase) as exc:
        print(f"kpred: error: {exc}", file=sys.stderr)
        return 2
    except storage.StorageError as exc:
        print(f"kpred: error: {exc}", file=sys.stderr)
        return 2 if "expected" in str(exc) or "missing" in str(exc) else 1
    except (ad.GradientError, ValueError, OSError) as exc:
        print(f"kpred: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
