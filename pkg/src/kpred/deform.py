"""Keypoint-driven deformation: forward passes, losses and the two deformation trainers."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nets
from .cage import influence_mask
from .geometry import farthest_point_sampling, random_slice

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss; ``last_good`` holds the parameters before the bad step."""

    def __init__(self, msg, last_good=None, history=None):
        super().__init__(msg)
        self.last_good = last_good
        self.history = history or []


@dataclass
class TrainConfig:
    lambda_kpt: float = 2.0
    lambda_wkpt: float = 20.0
    batch: int = 16
    epochs: int = 10
    lr_deform: float = 1e-3
    lr_retrieval: float = 1e-2
    lr_partial: float = 1e-3
    gamma_range: tuple = (0.25, 0.90)
    seed: int = 0
    steps_per_epoch: int | None = None
    kpt_reg_both: bool = True
    clip_norm: float = 5.0
    dar: bool = True
    cb: bool = True
    x2y_regions: str = "requery"
    warmup_steps: int = 40

    def __post_init__(self):
        self.gamma_range = tuple(self.gamma_range)
        if min(self.lambda_kpt, self.lambda_wkpt) < 0:
            raise ValueError("loss weights must be non-negative")
        lo, hi = self.gamma_range
        if not (0.0 <= lo <= hi < 1.0):
            raise ValueError(f"gamma range {self.gamma_range} must lie in [0, 1)")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be non-negative")
        if self.x2y_regions not in ("requery", "track"):
            raise ValueError("x2y_regions must be 'requery' or 'track'")

    def n_steps(self, n_items):
        return self.steps_per_epoch or max(1, math.ceil(n_items / self.batch))


@dataclass
class SourceState:
    keypoints: ad.Tensor
    influence: ad.Tensor
    mask: np.ndarray
    encoded: object = None


@dataclass
class DeformResult:
    points: ad.Tensor
    cage_vertices: ad.Tensor
    k_src: ad.Tensor
    k_tgt: ad.Tensor
    influence: ad.Tensor
    mask: np.ndarray
    mesh_vertices: np.ndarray | None = None
    target: object = None
    losses: dict = field(default_factory=dict)

    @property
    def deformed(self) -> np.ndarray:
        return np.asarray(self.points.data, dtype=np.float64)


def source_state(src, bundle, enc=None) -> SourceState:
    """Source keypoints and the masked influence field (depends on the source only)."""
    enc = enc or nets.encode_shape(src.points, bundle)
    mask = influence_mask(src.cage.vertices, enc.keypoints.data, bundle.arch.radius)
    context = nets.region_context(enc.features, enc.regions, bundle, "deform_attn")
    return SourceState(enc.keypoints, nets.influence_head(context, bundle, mask), mask, enc)


def deform_with(src, state: SourceState, k_tgt, bundle, with_mesh=False) -> DeformResult:
    """Move the cage by the influence-weighted keypoint offsets and interpolate."""
    k_tgt = ad.const(k_tgt)
    if k_tgt.shape != state.keypoints.shape:
        raise ValueError(f"keypoint shapes differ: {k_tgt.shape} vs {state.keypoints.shape}")
    offsets = ad.sub(k_tgt, state.keypoints)
    cage_v = ad.add(ad.const(src.cage.vertices.astype(bundle.dtype)),
                    ad.matmul(ad.transpose(state.influence), offsets))
    pts = ad.matmul(ad.const(src.mvc.astype(bundle.dtype)), cage_v)
    mesh_v = None
    if with_mesh and src.mesh_mvc is not None:
        mesh_v = src.mesh_mvc @ np.asarray(cage_v.data, dtype=np.float64)
    return DeformResult(pts, cage_v, state.keypoints, k_tgt, state.influence, state.mask, mesh_v)


def deform_forward(src, tgt, bundle, partial=False, with_mesh=False) -> DeformResult:
    """Full forward pass: keypoints on both shapes, source influence, cage move, MVC interpolation."""
    tgt_enc = nets.encode_shape(tgt, bundle, partial=partial)
    res = deform_with(src, source_state(src, bundle), tgt_enc.keypoints, bundle, with_mesh)
    res.target = tgt_enc
    return res


# ------------------------------------------------------------------ losses

def loss_sim(result: DeformResult, tgt):
    return ad.chamfer(result.points, ad.const(np.asarray(tgt, dtype=result.points.dtype)))


def loss_kpt(keypoints, pc, fps_targets=None):
    """Chamfer between keypoints and FPS samples of ``pc`` (FPS points carry no gradient)."""
    kp = ad.const(keypoints)
    if fps_targets is None:
        pts = np.asarray(pc, dtype=np.float64)
        fps_targets = pts[farthest_point_sampling(pts, kp.shape[0])]
    return ad.chamfer(kp, ad.const(np.asarray(fps_targets, dtype=kp.dtype)))


def loss_def(result: DeformResult, tgt, cfg: TrainConfig, src_fps=None, tgt_fps=None, src_points=None):
    """``L_sim + lambda_kpt * L_kpt``; returns (total, breakdown of floats)."""
    sim = loss_sim(result, tgt)
    if src_fps is None:
        src_fps = np.asarray(src_points, dtype=np.float64)[
            farthest_point_sampling(src_points, result.k_src.shape[0])]
    kpt = loss_kpt(result.k_src, None, src_fps)
    if cfg.kpt_reg_both:
        kpt = ad.scale(ad.add(kpt, loss_kpt(result.k_tgt, tgt, tgt_fps)), 0.5)
    total = ad.add(sim, ad.scale(kpt, cfg.lambda_kpt))
    return total, {"L_sim": float(sim.data), "L_kpt": float(kpt.data), "L_def": float(total.data)}


def loss_wkpt(k_full, k_part, densities):
    """Density-weighted L1 between teacher and student keypoints (teacher is constant)."""
    teacher = ad.const(np.asarray(k_full.data if isinstance(k_full, ad.Tensor) else k_full))
    k_part = ad.const(k_part)
    teacher = ad.const(teacher.data.astype(k_part.dtype))
    d = ad.const(np.asarray(densities, dtype=k_part.dtype))
    return ad.sum_(ad.mul(d, ad.l1_rows(teacher, k_part)))


def loss_pdef(result: DeformResult, tgt_partial, cfg: TrainConfig, k_full=None, densities=None):
    """``UCD(target -> deformed) + lambda_wkpt * L_wkpt``; returns (total, breakdown)."""
    usim = ad.unilateral_chamfer(ad.const(np.asarray(tgt_partial, dtype=result.points.dtype)), result.points)
    total, parts = usim, {"L_usim": float(usim.data)}
    if k_full is not None and cfg.lambda_wkpt > 0:
        w = loss_wkpt(k_full, result.k_tgt, densities)
        total = ad.add(usim, ad.scale(w, cfg.lambda_wkpt))
        parts["L_wkpt"] = float(w.data)
    else:
        parts["L_wkpt"] = 0.0
    parts["L_pdef"] = float(total.data)
    return total, parts


# ------------------------------------------------------------------ training

def _optimizer_step(bundle, lr, clip, t=None, warmup=0):
    """Clipped Adam step; ``lr`` ramps linearly over the first ``warmup`` steps."""
    if t is not None and warmup > 0:
        lr = lr * min(1.0, t / warmup)
    names = bundle.store.trainable()
    ad.clip_grad_norm(bundle.store, clip, names)
    ad.adam_step(bundle.store, lr, names=names)


def _check_finite(value, bundle, snapshot, history):
    if not np.isfinite(value):
        raise TrainingAborted(f"non-finite loss {value}", last_good=snapshot, history=history)


def train_deform(sources, targets, bundle, cfg: TrainConfig, on_step=None):
    """Adam on L_def over random (database source, training target) pairs.

    ``sources`` are ShapeRecords, ``targets`` a list of (id, points). Only the
    deformation-side blocks are trainable. Returns the per-step history.
    """
    store = bundle.store
    store.set_trainable(store.params, False)
    store.set_trainable(nets.DEFORM_PREFIXES, True)
    rng = np.random.default_rng(cfg.seed)
    n_k = bundle.arch.n_keypoints
    tgt_fps = {tid: pts[farthest_point_sampling(pts, n_k)] for tid, pts in targets}
    history = []
    steps = cfg.n_steps(len(targets))
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(targets))
        for step in range(steps):
            snapshot = store.copy()
            store.zero_grad()
            picks = [order[(step * cfg.batch + b) % len(order)] for b in range(cfg.batch)]
            srcs = rng.integers(len(sources), size=cfg.batch)
            total, rows = None, []
            for t_i, s_i in zip(picks, srcs):
                tid, tpts = targets[t_i]
                src = sources[s_i]
                res = deform_forward(src, tpts, bundle)
                loss, parts = loss_def(res, tpts, cfg, src.fps_targets(n_k), tgt_fps[tid])
                rows.append(parts)
                total = loss if total is None else ad.add(total, loss)
            total = ad.scale(total, 1.0 / cfg.batch)
            rec = {"epoch": epoch, "step": step,
                   **{k: float(np.mean([r[k] for r in rows])) for k in ("L_sim", "L_kpt", "L_def")}}
            _check_finite(rec["L_def"], bundle, snapshot, history)
            ad.backward(total)
            _optimizer_step(bundle, cfg.lr_deform, cfg.clip_norm, len(history) + 1, cfg.warmup_steps)
            history.append(rec)
            if on_step:
                on_step(rec)
        log.info("deform epoch %d: L_def %.5f", epoch,
                 np.mean([h["L_def"] for h in history if h["epoch"] == epoch]))
    store.set_trainable(store.params, False)
    return history


def train_partial(sources, targets, bundle, cfg: TrainConfig, on_step=None, warm_start=True):
    """Teacher-student training of the partial keypoint predictor on random slices.

    The full predictor (teacher) and every other block stay frozen. With
    ``warm_start`` the student starts as a copy of the teacher.
    """
    store = bundle.store
    if warm_start:
        nets.copy_full_predictor_to_partial(bundle)
    store.set_trainable(store.params, False)
    store.set_trainable(nets.PARTIAL_PREFIXES, True)
    bundle.meta["partial_cb"] = bool(cfg.cb)
    rng = np.random.default_rng(cfg.seed)
    src_cache = {}
    with ad.no_grad():
        teacher = {tid: nets.encode_shape(pts, bundle).keypoints.data.copy() for tid, pts in targets}
    history = []
    steps = cfg.n_steps(len(targets))
    lo, hi = cfg.gamma_range
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(targets))
        for step in range(steps):
            snapshot = store.copy()
            store.zero_grad()
            total, rows = None, []
            for b in range(cfg.batch):
                tid, full = targets[order[(step * cfg.batch + b) % len(order)]]
                gamma = rng.uniform(lo, hi)
                part = random_slice(full, gamma, seed=int(rng.integers(2**31)))
                s_i = int(rng.integers(len(sources)))
                src = sources[s_i]
                if s_i not in src_cache:
                    with ad.no_grad():
                        src_cache[s_i] = source_state(src, bundle)
                enc = nets.encode_shape(part, bundle, partial=True)
                res = deform_with(src, src_cache[s_i], enc.keypoints, bundle)
                dens = enc.regions.densities if cfg.cb else np.ones(bundle.arch.n_keypoints)
                loss, parts = loss_pdef(res, part, cfg, teacher[tid], dens)
                rows.append(parts)
                total = loss if total is None else ad.add(total, loss)
            total = ad.scale(total, 1.0 / cfg.batch)
            rec = {"epoch": epoch, "step": step,
                   **{k: float(np.mean([r[k] for r in rows])) for k in ("L_usim", "L_wkpt", "L_pdef")}}
            _check_finite(rec["L_pdef"], bundle, snapshot, history)
            ad.backward(total)
            _optimizer_step(bundle, cfg.lr_partial, cfg.clip_norm, len(history) + 1, cfg.warmup_steps)
            history.append(rec)
            if on_step:
                on_step(rec)
        log.info("partial epoch %d: L_pdef %.5f", epoch,
                 np.mean([h["L_pdef"] for h in history if h["epoch"] == epoch]))
    store.set_trainable(store.params, False)
    return history


def epoch_means(history, key):
    epochs = sorted({h["epoch"] for h in history})
    return [float(np.mean([h[key] for h in history if h["epoch"] == e])) for e in epochs]
