"""Token database, (density-weighted) retrieval, reconstruction-supervised token training, top-k evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nets
from .deform import TrainConfig, TrainingAborted, _optimizer_step, deform_with, source_state
from .geometry import GeometryError, chamfer_distance, random_slice, unilateral_chamfer
from .records import ShapeRecord, make_record

log = logging.getLogger(__name__)

class StaleDatabase(ValueError):
    pass


@dataclass
class TokenDatabase:
    records: list
    fingerprint: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate record ids")
        shapes = {r.tokens.shape for r in self.records}
        if len(shapes) > 1:
            raise ValueError(f"records disagree on token shape: {shapes}")
        self._stack = None

    @property
    def n_keypoints(self):
        return int(self.records[0].keypoints.shape[0]) if self.records else 0

    @property
    def token_dim(self):
        return int(self.records[0].tokens.shape[1]) if self.records else 0

    @property
    def ids(self):
        return [r.id for r in self.records]

    def __len__(self):
        return len(self.records)

    def by_id(self, rid):
        return next(r for r in self.records if r.id == rid)

    def token_stack(self):
        if self._stack is None:
            self._stack = np.stack([r.tokens.astype(np.float64) for r in self.records])
        return self._stack


def build_database(shapes, bundle, template=None, margin=1.2) -> TokenDatabase:
    """Tokenize ``shapes``, an iterable of (id, points, mesh or None), into a database.

    Shapes whose cage cannot be built are skipped and listed in ``meta["skipped"]``.
    """
    template = template or bundle.arch.cage_template
    records, skipped = [], []
    with ad.no_grad():
        for sid, pts, mesh in shapes:
            try:
                rec = make_record(sid, pts, mesh, template=template, margin=margin)
            except GeometryError as exc:
                log.warning("skipping %s: %s", sid, exc)
                skipped.append({"id": sid, "reason": str(exc)})
                continue
            enc = nets.encode_shape(rec.points, bundle)
            rec.keypoints = enc.keypoints.data.copy()
            rec.tokens = nets.retrieval_tokens(enc, bundle).data.copy()
            records.append(rec)
    return TokenDatabase(records, bundle.fingerprint(), {"skipped": skipped})


def query_tokens(points, bundle, partial=False):
    """Tokens, densities and the encoded target for a query cloud."""
    with ad.no_grad():
        enc = nets.encode_shape(points, bundle, partial=partial)
        tokens = nets.retrieval_tokens(enc, bundle).data.copy()
    return tokens, enc.regions.densities.copy(), enc


def region_l1(query, db: TokenDatabase) -> np.ndarray:
    """Per-region L1 distances, (n_records, n_regions), in float64."""
    q = np.asarray(query, dtype=np.float64)
    stack = db.token_stack()
    q = q.reshape(stack.shape[1:])
    return np.abs(stack - q[None]).sum(axis=2)


def token_l1(a, b, n_regions):
    """L1 between two global tokens, accumulated region by region."""
    a = np.asarray(a, dtype=np.float64).reshape(n_regions, -1)
    b = np.asarray(b, dtype=np.float64).reshape(n_regions, -1)
    return float(np.abs(a - b).sum(axis=1).sum())


def _rank(dist, db, k):
    ids = np.array(db.ids)
    order = np.lexsort((ids, dist))[:k]
    return [(db.records[i].id, float(dist[i])) for i in order]


def _check(db, fingerprint):
    if fingerprint is not None and fingerprint != db.fingerprint:
        raise StaleDatabase(f"database tokens come from bundle {db.fingerprint}, query bundle is {fingerprint}")


def retrieve_full(query, db: TokenDatabase, k=10, fingerprint=None):
    """Ascending global-token L1 distance; ties broken by id."""
    _check(db, fingerprint)
    return _rank(region_l1(query, db).sum(axis=1), db, k)


def retrieve_partial(query, densities, db: TokenDatabase, k=10, fingerprint=None):
    """Ascending density-weighted sum of per-region L1 distances."""
    _check(db, fingerprint)
    per_region = region_l1(query, db)
    w = np.asarray(densities, dtype=np.float64)
    if w.shape != (per_region.shape[1],):
        raise ValueError(f"need {per_region.shape[1]} densities, got {w.shape}")
    return _rank((per_region * w[None]).sum(axis=1), db, k)


# ------------------------------------------------------------------ training

def _regions_of(points, keypoints, r):
    pts = np.asarray(points, dtype=np.float64)
    kp = np.asarray(keypoints, dtype=np.float64)
    d2 = np.sum((kp[:, None, :] - pts[None, :, :]) ** 2, axis=2)
    return [np.flatnonzero(row <= r * r) for row in d2]


def loss_ret(x: ShapeRecord, y_points, bundle, cfg: TrainConfig | None = None):
    """Region reconstruction loss: Psi1 rebuilds regions of S_x, Psi2 regions of S_x deformed to S_y.

    Each summand averages over its non-empty ground-truth regions. Returns
    (loss, breakdown).
    """
    cfg = cfg or TrainConfig()
    arch = bundle.arch
    dt = bundle.dtype
    enc_x = nets.encode_shape(x.points, bundle)
    with ad.no_grad():
        k_y = nets.encode_shape(y_points, bundle).keypoints.data
        state = source_state(x, bundle, enc_x)
        x2y = np.asarray(deform_with(x, state, k_y, bundle).points.data, dtype=np.float64)
    k_x = enc_x.keypoints.data
    tokens = nets.retrieval_tokens(enc_x, bundle)
    regions_x = _regions_of(x.points, k_x, arch.radius)
    if cfg.x2y_regions == "track":
        regions_x2y = regions_x
    else:
        regions_x2y = _regions_of(x2y, k_y, arch.radius)

    if not arch.lgf:
        # single global token: reconstruct the whole shape instead of regions
        regions_x = [np.arange(len(x.points))]
        regions_x2y = [np.arange(len(x2y))]

    def summand(recon, gt_points, regions):
        terms = [ad.chamfer(ad.const(gt_points[idx].astype(dt)), ad.index(recon, i))
                 for i, idx in enumerate(regions) if len(idx)]
        if not terms:
            return None, 0
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
        return ad.scale(total, 1.0 / len(terms)), len(terms)

    rec1, n1 = summand(nets.decode_region(tokens, ad.const(k_x), bundle), x.points, regions_x)
    parts = {"L_rec_x": float(rec1.data) if rec1 is not None else 0.0, "n_terms": n1}
    loss = rec1
    if cfg.dar:
        rec2, n2 = summand(nets.decode_region(tokens, ad.const(k_y.astype(dt)), bundle), x2y, regions_x2y)
        parts["L_rec_x2y"] = float(rec2.data) if rec2 is not None else 0.0
        parts["n_terms"] += n2
        loss = rec2 if loss is None else (loss if rec2 is None else ad.add(loss, rec2))
    else:
        parts["L_rec_x2y"] = 0.0
    if loss is None:
        raise GeometryError("every support region is empty")
    parts["L_ret"] = float(loss.data)
    return loss, parts


def train_retrieval(sources, targets, bundle, cfg: TrainConfig, on_step=None):
    """Adam on L_ret over random (database shape, training shape) pairs; deformation side frozen."""
    store = bundle.store
    store.set_trainable(store.params, False)
    store.set_trainable(nets.RETRIEVAL_PREFIXES, True)
    rng = np.random.default_rng(cfg.seed)
    history = []
    steps = cfg.n_steps(len(targets))
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(targets))
        for step in range(steps):
            snapshot = store.copy()
            store.zero_grad()
            total, rows = None, []
            for b in range(cfg.batch):
                _, y_pts = targets[order[(step * cfg.batch + b) % len(order)]]
                x = sources[int(rng.integers(len(sources)))]
                loss, parts = loss_ret(x, y_pts, bundle, cfg)
                rows.append(parts)
                total = loss if total is None else ad.add(total, loss)
            total = ad.scale(total, 1.0 / cfg.batch)
            rec = {"epoch": epoch, "step": step,
                   **{k: float(np.mean([r[k] for r in rows])) for k in ("L_rec_x", "L_rec_x2y", "L_ret")}}
            if not np.isfinite(rec["L_ret"]):
                raise TrainingAborted(f"non-finite loss {rec['L_ret']}", snapshot, history)
            ad.backward(total)
            _optimizer_step(bundle, cfg.lr_retrieval, cfg.clip_norm, len(history) + 1, cfg.warmup_steps)
            history.append(rec)
            if on_step:
                on_step(rec)
        log.info("retrieval epoch %d: L_ret %.5f", epoch,
                 np.mean([h["L_ret"] for h in history if h["epoch"] == epoch]))
    store.set_trainable(store.params, False)
    return history


# ------------------------------------------------------------------ evaluation

@dataclass
class EvalResult:
    rows: list
    best: dict
    summary: float
    occlusion: float = 0.0


class SourceCache:
    """Per-record source keypoints and influence fields (target independent)."""

    def __init__(self, bundle):
        self.bundle = bundle
        self._cache = {}

    def __call__(self, rec):
        if rec.id not in self._cache:
            with ad.no_grad():
                self._cache[rec.id] = source_state(rec, self.bundle)
        return self._cache[rec.id]


def red(target_points, db, bundle, k=10, partial=False, cb=True, cache=None, with_mesh=False):
    """Retrieve top-k candidates for one target and deform each; returns ranked candidate dicts."""
    cache = cache or SourceCache(bundle)
    tokens, dens, enc = query_tokens(target_points, bundle, partial=partial)
    if partial and bundle.arch.lgf:
        ranking = retrieve_partial(tokens, dens if cb else np.ones_like(dens), db, k, bundle.fingerprint())
    else:
        ranking = retrieve_full(tokens, db, k, bundle.fingerprint())
    metric = unilateral_chamfer if partial else chamfer_distance
    tgt = np.asarray(target_points, dtype=np.float64)
    out = []
    for rank, (rid, dist) in enumerate(ranking):
        rec = db.by_id(rid)
        with ad.no_grad():
            res = deform_with(rec, cache(rec), enc.keypoints.data, bundle, with_mesh=with_mesh)
        deformed = res.deformed
        out.append({"rank": rank, "candidate_id": rid, "token_distance": dist,
                    "metric": metric(tgt, deformed) if partial else metric(deformed, tgt),
                    "metric_undeformed": metric(tgt, rec.points) if partial else metric(rec.points, tgt),
                    "deformed": deformed, "deformed_mesh": res.mesh_vertices})
    best = min(range(len(out)), key=lambda i: (out[i]["metric"], i))
    for i, c in enumerate(out):
        c["best"] = i == best
    return out, enc


def evaluate_topk(targets, db, bundle, k=10, partial=False, occlusion=0.0, seed=0, cb=True,
                  slices_per_target=1):
    """Best-of-k R&D metric (CD, or UCD for partial inputs) per target, averaged over instances."""
    cache = SourceCache(bundle)
    rows, best = [], {}
    rng = np.random.default_rng(seed)
    for tid, pts in targets:
        for s in range(slices_per_target):
            inst = tid if slices_per_target == 1 else f"{tid}#{s}"
            query = pts
            slice_seed = int(rng.integers(2**31))
            if occlusion > 0:
                query = random_slice(pts, occlusion, seed=slice_seed)
            cands, _ = red(query, db, bundle, k=k, partial=partial, cb=cb, cache=cache)
            for c in cands:
                rows.append({"target_id": inst, "rank": c["rank"], "candidate_id": c["candidate_id"],
                             "token_distance": c["token_distance"], "metric_cd_or_ucd": c["metric"],
                             "metric_undeformed": c["metric_undeformed"], "best_flag": int(c["best"]),
                             "occlusion": occlusion})
            best[inst] = min(c["metric"] for c in cands)
    summary = float(np.mean(list(best.values())))
    return EvalResult(rows, best, summary, occlusion)
